import hashlib

import numpy as np
import pytest

from oracles import central_difference
from pqm import speakersim as ss
from pqm.checkpoint import model_to_bytes
from pqm.lora import AdapterSet
from pqm.toymodel import (
    TrainConfig,
    build_model,
    evaluate,
    forward,
    frozen_prefix,
    fresh_adapters,
    loss,
    loss_and_grads,
    predict,
    pseudo_label,
    quantise_model,
    train,
)


@pytest.fixture(scope="module")
def task():
    pool = [ds for _, ds in ss.generate_pool(8, 60, seed=5)]
    return ss.stack(pool, "train"), ss.stack(pool, "test")


def reference_logits(model, tokens):
    """Straight-line FP64 forward with explicit loops over time."""
    W = {n: layer.dense().astype(np.float64) for n, layer in model.layers.items()}
    Bv = {n: layer.bias.astype(np.float64) for n, layer in model.layers.items() if layer.bias is not None}
    out = []
    for seq in tokens:
        x = np.stack([W["embed"][t] for t in seq])
        T = len(seq)
        conv = np.zeros_like(x)
        for t in range(T):
            for j, off in enumerate((-1, 0, 1)):
                if 0 <= t + off < T:
                    conv[t] += W["conv"][:, j] * x[t + off]
        conv += Bv["conv"]
        h = np.tanh(conv @ W["lin1"].T + Bv["lin1"])
        h = np.tanh(h @ W["lin2"].T + Bv["lin2"])
        out.append(h.mean(axis=0) @ W["head"].T + Bv["head"])
    return np.array(out)


def reference_loss(logits, labels):
    m = logits.max(axis=1, keepdims=True)
    logz = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(logz - logits[np.arange(len(labels)), labels]))


def test_census_and_shape():
    m = build_model()
    census = m.census()
    assert census["linear"] / m.num_params >= 0.9
    assert m["embed"].shape == (64, 320) and m["conv"].shape == (320, 3) and m["head"].shape == (10, 320)
    assert [n for n, layer in m.layers.items() if layer.lora_attached] == ["lin1", "lin2"]
    with pytest.raises(ValueError):
        build_model(4)


def test_same_seed_same_checkpoint():
    assert model_to_bytes(build_model(32, 3)) == model_to_bytes(build_model(32, 3))
    assert model_to_bytes(build_model(32, 3)) != model_to_bytes(build_model(32, 4))


def test_forward_matches_fp64_reference(task):
    (tokens, labels), _ = task
    model = build_model(32, 1)
    tok, lab = tokens[:16], labels[:16]
    ref = reference_logits(model, tok)
    np.testing.assert_allclose(forward(model.astype(np.float64), tok), ref, rtol=1e-10, atol=1e-10)
    assert abs(loss(model, tok, lab) - reference_loss(ref, lab)) < 1e-5


def test_quantised_forward_uses_dequantised_weights(task):
    (tokens, _), _ = task
    q, _ = quantise_model(build_model(32, 1))
    np.testing.assert_allclose(forward(q, tokens[:8]), reference_logits(q, tokens[:8]), rtol=1e-4, atol=1e-5)


def test_bad_tokens_rejected():
    m = build_model(16)
    with pytest.raises(ValueError):
        forward(m, np.array([[64]]))
    with pytest.raises(ValueError):
        forward(m, np.array([1, 2]))
    with pytest.raises(ValueError):
        loss(m, np.array([[1, 2]]), np.array([0, 1]))


def test_saturated_head_gives_zero_loss():
    m = build_model(16)
    m["head"].weight[...] = 0
    m["head"].bias[...] = -1e3
    m["head"].bias[4] = 1e3
    tokens = np.arange(40).reshape(4, 10)
    assert loss(m, tokens, np.full(4, 4)) < 1e-12
    assert loss(m, tokens, np.full(4, 4)) == loss(m, tokens, np.full(4, 4))


def _fd_model_check(model, tokens, labels, adapters, mode):
    _, grads = loss_and_grads(model, tokens, labels, adapters, mode)
    for key, analytic in grads.items():
        name, part = key.split(".")
        if mode == "full_finetune":
            param = getattr(model[name], part)
        else:
            param = getattr(adapters[name], part)
        numeric = central_difference(lambda: loss(model, tokens, labels, adapters), param, eps=1e-5)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        assert rel < 1e-4, (key, rel)
    return grads


def test_full_gradients_match_finite_differences():
    model = build_model(8, 2, vocab=12, classes=4).astype(np.float64)
    for layer in model.layers.values():
        if layer.bias is not None:
            layer.bias[...] = np.random.default_rng(0).normal(0, 0.1, layer.bias.shape)
    rng = np.random.default_rng(1)
    tokens, labels = rng.integers(0, 12, (5, 6)), rng.integers(0, 4, 5)
    grads = _fd_model_check(model, tokens, labels, None, "full_finetune")
    assert set(grads) == {f"{n}.{p}" for n in model.layers for p in ("weight", "bias") if getattr(model[n], p) is not None}


@pytest.mark.parametrize("quantised", [False, True])
def test_adapter_gradients_match_finite_differences(quantised):
    model = build_model(8, 3, vocab=12, classes=4)
    if quantised:
        model, _ = quantise_model(model, block_size=16)
    model = model.astype(np.float64)
    ads = fresh_adapters(model, 2, seed=4)
    rng = np.random.default_rng(2)
    for ad in ads.adapters.values():
        ad.a = ad.a.astype(np.float64)
        ad.b = rng.normal(0, 0.3, ad.b.shape)
    tokens, labels = rng.integers(0, 12, (4, 5)), rng.integers(0, 4, 4)
    grads = _fd_model_check(model, tokens, labels, ads, "lora_only")
    assert set(grads) == {"lin1.a", "lin1.b", "lin2.a", "lin2.b"}


def test_frozen_prefix_matches_full_forward(task):
    (tokens, labels), _ = task
    q, _ = quantise_model(build_model(32, 1))
    ads = fresh_adapters(q, 2, 3)
    rng = np.random.default_rng(8)
    for ad in ads.adapters.values():
        ad.b = rng.normal(0, 0.1, ad.b.shape).astype(np.float32)
    prefix = frozen_prefix(q, tokens[:40], np.float32)
    idx = rng.permutation(40)[:16]
    sliced = {k: v[idx] for k, v in prefix.items()}
    np.testing.assert_allclose(forward(q, tokens[idx], ads, _prefix=sliced), forward(q, tokens[idx], ads), rtol=1e-5, atol=1e-6)
    v0, g0 = loss_and_grads(q, tokens[idx], labels[idx], ads, "lora_only")
    v1, g1 = loss_and_grads(q, tokens[idx], labels[idx], ads, "lora_only", sliced)
    assert v1 == pytest.approx(v0, rel=1e-6)
    for key in g0:
        np.testing.assert_allclose(g1[key], g0[key], rtol=1e-4, atol=1e-7)
    with pytest.raises(ValueError):
        forward(q, tokens[idx[::-1]], ads, _prefix=sliced)
    with pytest.raises(ValueError):
        loss_and_grads(build_model(32, 1), tokens[idx], labels[idx], None, "full_finetune", sliced)


def test_mode_preconditions():
    m = build_model(16)
    tokens, labels = np.zeros((2, 3), int), np.zeros(2, int)
    with pytest.raises(ValueError):
        loss_and_grads(m, tokens, labels, None, "lora_only")
    q, _ = quantise_model(m)
    with pytest.raises(ValueError):
        loss_and_grads(q, tokens, labels, None, "full_finetune")
    with pytest.raises(ValueError):
        train(m, (tokens, labels), TrainConfig(steps=1, mode="lora_only"))
    bad = AdapterSet("x", {"head": fresh_adapters(m, 2, 0)["lin1"]})
    with pytest.raises(ValueError):
        forward(m, tokens, bad)


def test_fresh_adapters_neutral_bitwise(task):
    (tokens, _), _ = task
    q, _ = quantise_model(build_model(32, 1))
    ads = fresh_adapters(q, 4, 0)
    assert forward(q, tokens[:20], ads).tobytes() == forward(q, tokens[:20]).tobytes()


def test_quantise_model_selection():
    m = build_model()
    same, s0 = quantise_model(m, [])
    assert s0.ratio == 1.0 and not same.quantised
    _, lin = quantise_model(m, ["linear"])
    _, every = quantise_model(m, ["linear", "conv", "embed"])
    assert lin.ratio < every.ratio
    assert every.ratio >= 6.5
    q, _ = quantise_model(m)
    assert q["lin1"].bias is m["lin1"].bias or np.array_equal(q["lin1"].bias, m["lin1"].bias)
    with pytest.raises(ValueError):
        quantise_model(q)
    with pytest.raises(ValueError):
        quantise_model(m, ["attention"])


def test_untrained_model_near_chance(task):
    _, (tokens, labels) = task
    err = evaluate(build_model(seed=7), tokens, labels)
    assert abs(err - 90.0) <= 5.0 + 100 * 3 * np.sqrt(0.09 / len(labels))


def test_zero_steps_changes_nothing(task):
    (tokens, labels), dev = task
    q, _ = quantise_model(build_model(32, 1))
    ads = fresh_adapters(q, 2, 1)
    res = train(q, (tokens, labels), TrainConfig(steps=0), adapters=ads, dev=dev)
    assert res.adapters["lin1"].a.tobytes() == ads["lin1"].a.tobytes()
    assert res.dev_loss == loss(q, *dev, ads)


def test_lora_training_keeps_base_frozen(task):
    (tokens, labels), dev = task
    q, _ = quantise_model(build_model(32, 1))
    before = hashlib.sha256(model_to_bytes(q)).hexdigest()
    ads = fresh_adapters(q, 2, 1)
    res = train(q, (tokens, labels), TrainConfig(steps=20, lr=1e-2), adapters=ads, dev=dev)
    assert hashlib.sha256(model_to_bytes(q)).hexdigest() == before
    assert hashlib.sha256(model_to_bytes(res.model)).hexdigest() == before
    assert not ads["lin1"].b.any() and res.adapters["lin1"].b.any()


def test_training_is_deterministic(task):
    (tokens, labels), _ = task
    cfg = TrainConfig(steps=15, mode="full_finetune", seed=3)
    a = train(build_model(32, 1), (tokens, labels), cfg)
    b = train(build_model(32, 1), (tokens, labels), cfg)
    assert a.train_losses == b.train_losses
    assert model_to_bytes(a.model) == model_to_bytes(b.model)


def test_golden_training_run(task):
    (tokens, labels), _ = task
    model = build_model(seed=42)
    initial = loss(model, tokens, labels)
    res = train(model, (tokens, labels), TrainConfig(steps=300, mode="full_finetune", seed=42))
    final = loss(res.model, tokens, labels)
    assert final < 0.5 * initial
    assert res.train_losses[0] == pytest.approx(res.train_losses[0])
    assert len(res.train_losses) == 300


def test_sgd_option_and_config_validation(task):
    (tokens, labels), _ = task
    res = train(build_model(16), (tokens, labels), TrainConfig(steps=5, optimiser="sgd", lr=0.1, mode="full_finetune"))
    assert len(res.train_losses) == 5
    for bad in ({"lr": 0}, {"optimiser": "rmsprop"}, {"mode": "x"}, {"beta1": 1.0}, {"select_metric": "f1"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_dev_selection_never_worse_than_start(task):
    (tokens, labels), dev = task
    q, _ = quantise_model(build_model(32, 1))
    ads = fresh_adapters(q, 2, 1)
    start = loss(q, *dev, ads)
    res = train(q, (tokens[:10], labels[:10]), TrainConfig(steps=60, lr=5e-2, select_every=5), adapters=ads, dev=dev)
    assert res.dev_loss <= start
    assert 0 <= res.selected_step <= 60


def test_evaluate_properties(task):
    _, (tokens, labels) = task
    model = build_model(32, 2)
    err = evaluate(model, tokens, labels)
    perm = np.random.default_rng(0).permutation(len(labels))
    assert evaluate(model, tokens[perm], labels[perm]) == err
    assert evaluate(model, tokens, predict(model, tokens)) == 0.0
    with pytest.raises(ValueError):
        evaluate(model, tokens[:0], labels[:0])


def test_pseudo_labels(task):
    (tokens, labels), (test_tokens, test_labels) = task
    weak = train(build_model(32, 1), (tokens, labels), TrainConfig(steps=5, mode="full_finetune")).model
    strong = train(build_model(32, 1), (tokens, labels), TrainConfig(steps=300, mode="full_finetune")).model
    for teacher in (weak, strong):
        pl_ = pseudo_label(teacher, test_tokens)
        assert np.array_equal(pl_, predict(teacher, test_tokens))
        assert 100 * np.mean(pl_ != test_labels) == evaluate(teacher, test_tokens, test_labels)
    assert np.mean(pseudo_label(strong, test_tokens) != test_labels) < np.mean(pseudo_label(weak, test_tokens) != test_labels)


def test_argmax_ties_go_to_lower_class():
    m = build_model(16)
    m["head"].weight[...] = 0
    m["head"].bias[...] = 0
    assert pseudo_label(m, np.zeros((3, 4), int)).tolist() == [0, 0, 0]
