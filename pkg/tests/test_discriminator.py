import pytest
import torch

from helpers import grad_relative_error
from sting.discriminator import (
    Discriminator,
    discriminate,
    discriminator_terms,
    loss_discriminator,
    sample_hint,
)
from sting.generator import loss_generator_adversarial

f64 = torch.float64


def _mask(shape, seed=0, p=0.7):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(shape, generator=g) < p).to(f64)


def test_hint_extremes():
    m = _mask((50, 20))
    assert torch.equal(sample_hint(m, 1.0, torch.Generator().manual_seed(0)), m)
    assert torch.equal(sample_hint(m, 0.0, torch.Generator().manual_seed(0)), torch.full_like(m, 0.5))


def test_hint_reveal_fraction():
    m = _mask((1000, 100))
    h = sample_hint(m, 0.1, torch.Generator().manual_seed(5))
    revealed = (h != 0.5).double().mean().item()
    assert 0.09 <= revealed <= 0.11
    assert torch.equal(h[h != 0.5], m[h != 0.5])


def test_hint_ratio_validated():
    with pytest.raises(ValueError):
        sample_hint(torch.ones(2, 2), 1.5)


def test_discriminator_range_and_determinism(tgen):
    d = Discriminator(3, 5, generator=tgen).double()
    x = torch.randn(2, 7, 3, generator=tgen, dtype=f64)
    h = sample_hint(_mask((2, 7, 3)), 0.1, tgen)
    out = discriminate(x, h, d)
    assert out.shape == x.shape
    assert ((out >= 0) & (out <= 1)).all()
    assert torch.equal(out, discriminate(x, h, d))


def test_zero_parameters_give_half(tgen):
    d = Discriminator(3, 5).double()
    with torch.no_grad():
        for p in d.parameters():
            p.zero_()
    x = torch.randn(2, 4, 3, generator=tgen, dtype=f64)
    assert torch.equal(d(x, torch.full_like(x, 0.5)), torch.full_like(x, 0.5))


def test_discriminator_input_checks():
    d = Discriminator(3, 4)
    with pytest.raises(ValueError):
        d(torch.zeros(1, 4, 3), torch.zeros(1, 4, 2))
    x = torch.zeros(1, 4, 3)
    x[0, 1, 1] = float("nan")
    with pytest.raises(ValueError):
        d(x, torch.zeros(1, 4, 3))


def test_loss_examples():
    m = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=f64)
    assert loss_discriminator(m.clone(), m).item() == -1.0
    assert loss_discriminator(torch.full_like(m, 0.5), m).item() == 0.0
    assert loss_discriminator(1 - m, m).item() == 1.0


def test_loss_bounds_random(tgen):
    for _ in range(1000):
        shape = (int(torch.randint(1, 6, (1,), generator=tgen)), 3)
        p = torch.rand(shape, generator=tgen, dtype=f64)
        m = (torch.rand(shape, generator=tgen) < 0.5).to(f64)
        val = loss_discriminator(p, m).item()
        assert -1.0 <= val <= 1.0


def test_fake_term_is_negated_generator_loss(tgen):
    p = torch.rand(6, 4, generator=tgen, dtype=f64)
    m = (torch.rand(6, 4, generator=tgen) < 0.5).to(f64)
    fake_term, real_term = discriminator_terms(p, m)
    assert torch.equal(fake_term, -loss_generator_adversarial(p, m))
    assert torch.equal(loss_discriminator(p, m), fake_term - real_term)


def test_loss_gradient(tgen):
    p = torch.rand(4, 3, generator=tgen, dtype=f64)
    m = (torch.rand(4, 3, generator=tgen) < 0.5).to(f64)
    assert grad_relative_error(lambda p: loss_discriminator(p, m), [p]) < 1e-4


def test_loss_gradient_wrt_parameters(tgen):
    d = Discriminator(3, 4, generator=tgen).double()
    x = torch.rand(1, 4, 3, generator=tgen, dtype=f64)
    m = (torch.rand(1, 4, 3, generator=tgen) < 0.5).to(f64)
    m[0, 0, 0], m[0, 1, 1] = 1.0, 0.0
    h = sample_hint(m, 0.5, tgen)
    names = [n for n, _ in d.named_parameters()]

    def fn(*ps):
        scores = torch.func.functional_call(d, dict(zip(names, ps)), (x, h))
        return loss_discriminator(scores, m)

    assert grad_relative_error(fn, list(d.parameters())) < 1e-4
