import io
import json

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import micro_model
from changediff.schedule import NoiseSchedule, build_schedule
from changediff.train import DivergenceError, TrainConfig, _lr_lambda, draw_noise, train, training_loss

f64 = torch.float64
SCHED = NoiseSchedule.from_alphas([0.9, 0.7, 0.5, 0.3], alpha0=0.95)


def _batch(model, B=3, seed=0, sched=SCHED):
    gen = torch.Generator().manual_seed(seed)
    ids = torch.randint(0, model.vocab_size, (B, model.cfg.seq_len), generator=gen)
    idi = torch.randn(B, model.cfg.image_tokens, model.cfg.image_channels, generator=gen, dtype=f64)
    t, eps0, eps_t = draw_noise(ids, model, sched, gen)
    return ids, idi, t, eps0, eps_t


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_breakdown_additivity(seed):
    m = micro_model()
    lb = training_loss(m, *_batch(m, seed=seed), SCHED)
    f = lb.as_floats()
    assert abs(f["total"] - (f["l_T"] + f["l_mse"] + f["l_round"])) < 1e-6


def test_doubling_embeddings_quadruples_l_T():
    sched = NoiseSchedule.from_alphas([0.9, 0.7, 0.5, 0.3], alpha0=1.0)
    m = micro_model()
    batch = _batch(m, sched=sched)
    before = training_loss(m, *batch, sched).l_T.item()
    with torch.no_grad():
        m.embedding.weight.mul_(2)
    assert training_loss(m, *batch, sched).l_T.item() == pytest.approx(4 * before, rel=1e-12)


@pytest.mark.parametrize("t", [1, 2, 4])
def test_micro_instance_matches_scalar_oracle(t):
    m = micro_model(vocab_size=5, seed=t)
    gen = torch.Generator().manual_seed(10 + t)
    ids = torch.tensor([[1, 4, 0]])
    idi = torch.randn(1, 4, 5, generator=gen, dtype=f64)
    eps0 = torch.randn(1, 3, 4, generator=gen, dtype=f64)
    eps_t = torch.randn(1, 3, 4, generator=gen, dtype=f64)
    lb = training_loss(m, ids, idi, torch.tensor([t]), eps0, eps_t, SCHED)
    ref = oracles.training_loss(
        ids[0].tolist(), idi[0].tolist(), t, eps0[0].tolist(), eps_t[0].tolist(),
        m.embedding.weight.tolist(),
        (m.rounding.proj.weight.tolist(), m.rounding.proj.bias.tolist()),
        oracles.module_params(m.denoiser), list(SCHED.alphas), SCHED.alpha0, heads=2, depth=2,
    )
    for got, want in zip((lb.l_T, lb.l_mse, lb.l_round), ref):
        assert got.item() == pytest.approx(want, abs=1e-10)


def test_l_T_has_no_denoiser_gradient():
    m = micro_model()
    lb = training_loss(m, *_batch(m), SCHED)
    grads = torch.autograd.grad(lb.l_T, list(m.denoiser.parameters()), allow_unused=True)
    assert all(g is None or torch.count_nonzero(g) == 0 for g in grads)
    (g_emb,) = torch.autograd.grad(lb.l_T, [m.embedding.weight])
    assert torch.count_nonzero(g_emb) > 0


def test_loss_invariant_to_batch_order():
    m = micro_model()
    ids, idi, t, eps0, eps_t = _batch(m, B=5)
    perm = torch.tensor([3, 0, 4, 2, 1])
    a = training_loss(m, ids, idi, t, eps0, eps_t, SCHED).total
    b = training_loss(m, ids[perm], idi[perm], t[perm], eps0[perm], eps_t[perm], SCHED).total
    assert a.item() == pytest.approx(b.item(), abs=1e-12)


def test_terms_at_their_floor():
    sched = build_schedule("linear_beta", 2000, {"beta_min": 0.02, "beta_max": 0.05}, alpha0=1.0)
    assert sched.alpha_bar(2000) < 1e-20
    m = micro_model(vocab_size=4)
    with torch.no_grad():
        m.embedding.weight.copy_(torch.eye(4, dtype=f64) * 1.0)
        m.rounding.proj.weight.copy_(torch.eye(4, dtype=f64) * 100.0)
        m.rounding.proj.bias.zero_()
    ids = torch.tensor([[0, 1, 2], [3, 2, 1]])
    idi = torch.zeros(2, 4, 5, dtype=f64)
    eps = torch.randn(2, 3, 4, dtype=f64)
    target = m.embedding(ids).detach()
    lb = training_loss(m, ids, idi, torch.tensor([1, 700]), eps, eps, sched, denoise=lambda x, t, i: target)
    assert lb.l_mse.item() == 0.0
    assert lb.l_T.item() < 1e-20
    assert lb.l_round.item() < 1e-30


def test_step_range_checked():
    m = micro_model()
    ids, idi, _, eps0, eps_t = _batch(m)
    with pytest.raises(ValueError):
        training_loss(m, ids, idi, torch.tensor([0, 1, 1]), eps0, eps_t, SCHED)
    with pytest.raises(ValueError):
        training_loss(m, ids, idi, torch.tensor([5, 1, 1]), eps0, eps_t, SCHED)


# -- loop ---------------------------------------------------------------------------------


def _toy_arrays(model, N=6, seed=0):
    gen = torch.Generator().manual_seed(seed)
    ids = torch.randint(0, model.vocab_size, (N, model.cfg.seq_len), generator=gen)
    idi = torch.randn(N, model.cfg.image_tokens, model.cfg.image_channels, generator=gen, dtype=f64)
    return ids, idi


def test_zero_learning_rate_keeps_parameters():
    m = micro_model()
    before = {k: v.clone() for k, v in m.state_dict().items()}
    ids, idi = _toy_arrays(m)
    records = train(m, ids, torch.zeros_like(idi), SCHED, TrainConfig(epochs=1, batch_size=4, lr=0.0))
    assert len(records) == 2
    for k, v in m.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_seeded_runs_are_identical():
    logs = []
    for _ in range(2):
        m = micro_model(seed=1)
        ids, idi = _toy_arrays(m)
        buf = io.StringIO()
        train(m, ids, idi, SCHED, TrainConfig(epochs=3, batch_size=4, lr=1e-2, seed=5), log_file=buf)
        logs.append((buf.getvalue(), m.state_dict()))
    assert logs[0][0] == logs[1][0]
    for k in logs[0][1]:
        assert torch.equal(logs[0][1][k], logs[1][1][k])
    rec = json.loads(logs[0][0].splitlines()[0])
    assert set(rec) == {"step", "epoch", "l_T", "l_mse", "l_round", "total", "lr"}


def test_training_reduces_loss():
    m = micro_model(seed=2)
    ids, idi = _toy_arrays(m, N=4)
    records = train(m, ids, idi, SCHED, TrainConfig(epochs=300, batch_size=4, lr=3e-3, seed=0))
    first = sum(r["total"] for r in records[:20]) / 20
    last = sum(r["total"] for r in records[-20:]) / 20
    assert last < 0.5 * first


def test_max_steps_and_checkpoints():
    m = micro_model()
    ids, idi = _toy_arrays(m)
    seen = []
    records = train(m, ids, idi, SCHED, TrainConfig(epochs=50, batch_size=2, max_steps=7, checkpoint_every=3),
                    on_checkpoint=seen.append)
    assert [r["step"] for r in records] == list(range(1, 8))
    assert seen == [3, 6]


def test_divergence_reported_with_step():
    m = micro_model()
    with torch.no_grad():
        m.rounding.proj.bias.fill_(float("nan"))
    ids, idi = _toy_arrays(m)
    with pytest.raises(DivergenceError) as info:
        train(m, ids, idi, SCHED, TrainConfig(epochs=1, batch_size=2))
    assert info.value.step == 0


def test_input_validation():
    m = micro_model()
    ids, idi = _toy_arrays(m)
    with pytest.raises(ValueError):
        train(m, ids, idi[:2], SCHED, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train(m, ids + m.vocab_size, idi, SCHED, TrainConfig(epochs=1))
    for bad in (dict(epochs=0), dict(lr=-1.0), dict(lr_decay="cosine"), dict(dtype="float16")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_lr_factors():
    f = _lr_lambda(TrainConfig(warmup_steps=4, lr_decay="linear"), 10)
    assert [round(f(s), 6) for s in (0, 3, 5, 10)] == [0.25, 0.7, 0.5, 0.0]
    assert _lr_lambda(TrainConfig(), 10)(7) == 1.0
