import numpy as np
import pytest

from bnnsafe.bnn import weight_box
from bnnsafe.cegis import (
    CeDataset,
    CegisConfig,
    SpecDataset,
    eps_search,
    init_datasets,
    loss_total,
    run_cegis,
    train_candidate,
    verify_candidate,
)
from bnnsafe.environments import ToySystem, make_env
from bnnsafe.nn import MlpNetwork, TrainConfig, forward
from bnnsafe.zoo import load_policy
from conftest import random_policy


def _toy():
    env = ToySystem(a=0.5)
    pol = random_policy([1, 2, 1], np.random.default_rng(0))
    return env, pol


def _toy_cfg(**kw):
    base = dict(mode="spec_init", init_samples_x0=64, init_samples_xu=64, hidden=6, timeout=120.0,
                max_iterations=200, pretrain=TrainConfig(learning_rate=1e-2, epochs=200, batch_size=32))
    base.update(kw)
    return CegisConfig(**base)


def test_loss_examples():
    spec = SpecDataset(np.array([[0.0]]), np.array([1]))
    g = MlpNetwork.constant([1, 2, 1], 5.0)
    assert loss_total(g, spec, CeDataset.empty(1), cls="zero_one") == 0.0
    ce = CeDataset(np.array([[0.0]]), np.array([[1.0]]))
    assert loss_total(g, spec, ce, lam=1.0, cls="zero_one") == 0.0
    # g(x) = 1 - 2 relu(x): the pair goes from +1 to -1 and costs exactly lam
    g = MlpNetwork(([[1.0]], [[-2.0]]), ([0.0], [1.0]))
    assert forward(g, np.array([0.0]))[0] == 1.0 and forward(g, np.array([1.0]))[0] == -1.0
    assert loss_total(g, spec, ce, lam=1.0, cls="zero_one") == 1.0
    assert loss_total(g, spec, ce, lam=3.0, cls="zero_one") == 3.0


def test_loss_requires_spec_and_ignores_empty_ce():
    g = MlpNetwork.constant([1, 2, 1], -1.0)
    with pytest.raises(ValueError):
        loss_total(g, SpecDataset.empty(1), CeDataset.empty(1))
    spec = SpecDataset(np.array([[0.0], [1.0]]), np.array([1, 0]))
    assert loss_total(g, spec, CeDataset.empty(1), lam=100.0, cls="zero_one") == 0.5


def test_training_separates_linear_data(rng):
    x = rng.uniform(-1, 1, size=(400, 2))
    spec = SpecDataset(x, (x[:, 0] + x[:, 1] > 0).astype(int))
    g = MlpNetwork.random([2, 8, 1], rng)
    g = train_candidate(g, spec, CeDataset.empty(2), 1.0, TrainConfig(learning_rate=1e-2, epochs=100, batch_size=32))
    assert loss_total(g, spec, CeDataset.empty(2), cls="zero_one") < 0.1


def test_counterexample_term_increases_loss(rng):
    g = MlpNetwork.random([1, 6, 1], rng)
    spec = SpecDataset(np.array([[0.0]]), np.array([1]))
    xs = np.linspace(-1, 1, 41)[:, None]
    vals = forward(g, xs)[:, 0]
    pos, neg = xs[vals > 0], xs[vals < 0]
    if not (len(pos) and len(neg)):
        pytest.skip("random network has one sign on the grid")
    ce = CeDataset(pos[:1], neg[:1])
    assert loss_total(g, spec, ce) > loss_total(g, spec, CeDataset.empty(1))


def test_training_is_deterministic(rng):
    x = rng.uniform(-1, 1, size=(100, 1))
    spec = SpecDataset(x, (x[:, 0] > 0).astype(int))
    g = MlpNetwork.random([1, 4, 1], rng)
    tcfg = TrainConfig(learning_rate=1e-2, epochs=5, seed=3)
    a = train_candidate(g, spec, CeDataset.empty(1), 1.0, tcfg)
    b = train_candidate(g, spec, CeDataset.empty(1), 1.0, tcfg)
    assert a == b


def test_verify_reports_failing_check():
    env, pol = _toy()
    box = weight_box(pol, 1.0)
    assert verify_candidate(MlpNetwork.constant([1, 2, 1], -1.0), env, pol, box).witness.kind == "init"
    assert verify_candidate(MlpNetwork.constant([1, 2, 1], 1.0), env, pol, box).witness.kind == "unsafe"
    tent = MlpNetwork(([[1.0], [-1.0]], [[-1.0, -1.0]]), ([0.0, 0.0], [0.9]))
    assert verify_candidate(tent, env, pol, box).passed


def test_bootstrap_labels_put_unsafe_states_at_zero(rng):
    env = make_env("lds")
    pol = load_policy("lds")
    cfg = CegisConfig(bootstrap_trajectories=200, bootstrap_rollouts=2)
    spec = init_datasets(env, cfg, rng, pol, weight_box(pol, 0.5))
    assert len(spec) == 256 + 256 + 200
    inside = env.is_unsafe(spec.x)
    assert np.all(spec.y[inside] == 0)
    with pytest.raises(ValueError):
        init_datasets(env, cfg, rng)


def test_toy_system_certifies_and_invariant_separates():
    env, pol = _toy()
    out = run_cegis(env, pol, 1.0, _toy_cfg(), np.random.default_rng(7))
    assert out.safe, out.reason
    assert out.iterations <= 200
    # checks 2 and 3 imply these signs everywhere
    rng = np.random.default_rng(8)
    g = out.invariant
    assert np.all(forward(g, env.sample_states(env.initial_set, rng, 10_000))[:, 0] >= 0)
    assert np.all(forward(g, env.sample_states(env.unsafe_set, rng, 10_000))[:, 0] < 0)
    # no sample of the accumulated data is misclassified
    assert loss_total(g, out.spec, out.ce, cls="zero_one") == 0.0


def test_dataset_sizes_grow_monotonically():
    env = ToySystem(a=0.9, shift=0.15, initial=(-0.3, 0.3))
    pol = random_policy([1, 2, 1], np.random.default_rng(0))
    out = run_cegis(env, pol, 1.0, _toy_cfg(max_iterations=15, hidden=4), np.random.default_rng(2))
    sizes = [(r["d_spec"], r["d_ce"]) for r in out.records]
    assert all(b[0] >= a[0] and b[1] >= a[1] for a, b in zip(sizes, sizes[1:]))
    for r in out.records:
        assert set(r) == {"iter", "check_fired", "witness", "d_spec", "d_ce", "loss", "solver_ms"}


def test_no_retrain_verifies_once():
    env, pol = _toy()
    g = MlpNetwork.constant([1, 2, 1], 1.0)
    spec = SpecDataset(np.array([[0.0]]), np.array([1]))
    out = run_cegis(env, pol, 1.0, _toy_cfg(mode="no_retrain"), np.random.default_rng(0), g=g, spec=spec)
    assert not out.safe and out.iterations == 1 and len(out.records) == 1


def test_eps_search_schedule_validation():
    env, pol = _toy()
    assert eps_search(env, pol, [], _toy_cfg(), np.random.default_rng(0)).largest_safe is None
    with pytest.raises(ValueError):
        eps_search(env, pol, [1.0, 0.5], _toy_cfg(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        eps_search(env, pol, [0.5, np.inf], _toy_cfg(), np.random.default_rng(0))


def test_eps_search_warm_starts_and_is_monotone():
    env, pol = _toy()
    res = eps_search(env, pol, [0.5, 1.0, 2.0], _toy_cfg(), np.random.default_rng(3))
    assert [e for e, _ in res.entries] == [0.5, 1.0, 2.0]
    assert res.largest_safe == 2.0 and res.certificate.eps_scale == 2.0


def test_config_validation():
    with pytest.raises(ValueError):
        CegisConfig(lam=-1.0)
    with pytest.raises(ValueError):
        CegisConfig(timeout=0.0)
    with pytest.raises(ValueError):
        CegisConfig(mode="other")
    cfg = CegisConfig.from_dict({"lam": 2.0, "retrain": {"epochs": 3}})
    assert cfg.lam == 2.0 and cfg.retrain.epochs == 3
