import pytest
import torch

from stgllm.adapter import STGAdapter, combine
from stgllm.errors import ContextOverflowError, WidthMismatchError


def _adapter(w=140, d=768, p=12, seed=0):
    a = STGAdapter(w, d, p)
    a.reset_parameters(torch.Generator().manual_seed(seed))
    return a


def test_reference_shapes():
    a = _adapter()
    t_e = torch.randn(170, 140)
    q = a.encode(t_e)
    assert q.shape == (170, 768)
    assert a.decode(q, t_e).shape == (170, 12)


def test_encode_is_affine():
    a = _adapter(w=6, d=4, p=2)
    x, y = torch.randn(3, 6), torch.randn(3, 6)
    torch.testing.assert_close(a.encode(x + y) - a.encode(y), a.encode(x) - a.encode(torch.zeros(3, 6)))


def test_decode_uses_last_rows_and_residual():
    a = _adapter(w=5, d=4, p=3)
    with torch.no_grad():
        a.b2.normal_()
        a.b3.normal_()
    t_e = torch.randn(2, 5)
    h = torch.randn(6, 4)
    expected = ((h[-2:] @ a.W2 + a.b2) + t_e) @ a.W3 + a.b3
    torch.testing.assert_close(a.decode(h, t_e), expected)
    # prompt rows in front of the graph rows change nothing
    torch.testing.assert_close(a.decode(torch.cat([torch.randn(9, 4), h[-2:]]), t_e), expected)


def test_zero_hidden_state_leaves_the_skip_path():
    a = _adapter(w=5, d=4, p=3)
    t_e = torch.randn(2, 5)
    torch.testing.assert_close(a.decode(torch.zeros(2, 4), t_e), t_e @ a.W3)


def test_width_checks():
    a = _adapter(w=5, d=4, p=3)
    with pytest.raises(WidthMismatchError):
        a.encode(torch.randn(2, 6))
    with pytest.raises(WidthMismatchError):
        a.decode(torch.randn(2, 3), torch.randn(2, 5))
    with pytest.raises(WidthMismatchError):
        a.decode(torch.randn(1, 4), torch.randn(2, 5))


def test_combine_orders_prompt_first():
    p, g = torch.randn(3, 4), torch.randn(5, 4)
    s = combine(p, g)
    assert s.shape == (8, 4)
    torch.testing.assert_close(s[:3], p)
    torch.testing.assert_close(s[3:], g)
    assert combine(torch.zeros(0, 4), g) is g


def test_combine_errors():
    with pytest.raises(WidthMismatchError):
        combine(torch.randn(2, 3), torch.randn(2, 4))
    with pytest.raises(ContextOverflowError):
        combine(torch.randn(5, 4), torch.randn(5, 4), context_len=9)


def test_parameter_count():
    a = _adapter()
    assert sum(p.numel() for p in a.parameters()) == 217_640
    assert STGAdapter(12, 8, 2, with_encoder=False).W1 is None
