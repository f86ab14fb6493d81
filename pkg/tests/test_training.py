import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from chaindiar.features import FeatureConfig
from chaindiar.losses import AdaptationPolicy, bce_logits, drop_mask
from chaindiar.model import ModelConfig, build_model, load_checkpoint
from chaindiar.simulation import SimConfig, write_corpus
from chaindiar.training import (
    Chunk,
    NonFiniteGradient,
    OptimizerState,
    Sequence,
    TrainConfig,
    TrainingDiverged,
    adapt,
    batch_loss,
    chunk_bounds,
    drop_rng,
    fit,
    gradients,
    load_manifest_sequences,
    make_chunks,
    noam_lr,
    train_step,
)
from helpers import gradient_check, random_problem

FEAT = FeatureConfig(n_mels=4, context=1, subsample=10)
IN_DIM = FEAT.spliced_dim


def tiny_cfg(**kw):
    base = dict(input_dim=IN_DIM, d_model=8, n_heads=2, n_blocks=1, subtasks=("sad",), max_speakers=3)
    base.update(kw)
    return ModelConfig(**base)


def random_sequences(n, n_frames=40, seed=0):
    rng = np.random.default_rng(seed)
    seqs = []
    for i in range(n):
        spk = rng.integers(0, 2, (2, n_frames)).astype(np.int8)
        feats = rng.normal(size=(n_frames, IN_DIM)) + spk[0][:, None] - spk[1][:, None]
        seqs.append(Sequence(f"s{i}", feats, spk, ["a", "b"]))
    return seqs


def tiny_train_cfg(**kw):
    base = dict(chunk_frames=20, batch_size=2, max_epochs=2, lr_scale=1.0, warmup_steps=5, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# --- gradients --------------------------------------------------------------------------


def test_backward_closed_form():
    w = torch.tensor(0.7, dtype=torch.float64, requires_grad=True)
    x, y = 1.3, 1.0
    bce_logits(w * x, torch.tensor(y)).backward()
    expected = (1 / (1 + math.exp(-0.7 * x)) - y) * x
    assert float(w.grad) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("seed", [0, 1])
def test_full_model_gradient_check(seed):
    model, x, sub, refs, n_real = random_problem(seed, d_model=16)
    assert gradient_check(model, x, sub, refs, n_real, n_params=20, seed=seed) < 1e-4


def test_gradient_linearity():
    model, x, sub, refs, n_real = random_problem(2, d_model=8)
    from chaindiar.losses import two_stage_pit

    loss, _ = two_stage_pit(model, x, sub, refs, n_speakers=n_real)
    loss.graph.backward()
    once = {n: p.grad.clone() for n, p in model.named_parameters()}
    model.zero_grad()
    loss, _ = two_stage_pit(model, x, sub, refs, n_speakers=n_real)
    (2 * loss.graph).backward()
    for n, p in model.named_parameters():
        assert torch.equal(p.grad, 2 * once[n]), n


def test_nan_gradient_names_parameter():
    model = build_model(tiny_cfg())
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    model.speaker_decoder.bias.grad[0] = float("nan")
    with pytest.raises(NonFiniteGradient, match="speaker_decoder.bias"):
        gradients(model)


# --- optimizer steps ----------------------------------------------------------------------


def chunks_of(seqs, n=20):
    return make_chunks(seqs, n)


def test_zero_learning_rate_keeps_parameters():
    model = build_model(tiny_cfg(), 0)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    opt = OptimizerState.for_model(model)
    train_step(model, opt, chunks_of(random_sequences(2))[:2], tiny_train_cfg(lr_scale=0.0))
    for n, p in model.named_parameters():
        assert torch.equal(p, before[n]), n
    assert opt.step == 1


def test_single_item_equals_identical_batch():
    # compare the averaged gradients: Adam would amplify float noise on
    # parameters whose exact gradient is zero (e.g. attention key biases)
    chunk = chunks_of(random_sequences(1))[0]
    model = build_model(tiny_cfg(), 0)
    la, _ = batch_loss(model, [chunk])
    single = {n: p.grad.clone() for n, p in model.named_parameters()}
    model.zero_grad()
    lb, _ = batch_loss(model, [chunk, chunk, chunk])
    assert la.total == pytest.approx(lb.total, rel=1e-13)
    for n, p in model.named_parameters():
        torch.testing.assert_close(p.grad, single[n], rtol=1e-10, atol=1e-14, msg=n)


def test_loss_decreases_on_fixed_batch():
    batch = chunks_of(random_sequences(2))[:4]
    model = build_model(tiny_cfg(), 0)
    opt = OptimizerState.for_model(model)
    cfg = tiny_train_cfg(lr_scale=0.5, warmup_steps=10)
    losses = [train_step(model, opt, batch, cfg)[0].total for _ in range(50)]
    increases = sum(b > a for a, b in zip(losses, losses[1:]))
    assert increases <= 5
    assert losses[-1] < 0.5 * losses[0]


def test_divergence_guard():
    model = build_model(tiny_cfg(), 0)
    with torch.no_grad():
        model.speaker_decoder.bias.fill_(1e9)
    with pytest.raises(TrainingDiverged, match="step 1"):
        train_step(model, OptimizerState.for_model(model), chunks_of(random_sequences(1))[:1], tiny_train_cfg())


def test_empty_batch_rejected():
    model = build_model(tiny_cfg())
    with pytest.raises(ValueError):
        train_step(model, OptimizerState.for_model(model), [], tiny_train_cfg())


def test_noam_schedule():
    assert noam_lr(10, 64, 1.0, 10) == pytest.approx(64**-0.5 * 10**-0.5)
    assert noam_lr(5, 64, 1.0, 10) == pytest.approx(64**-0.5 * 5 * 10**-1.5)
    assert noam_lr(5, 64, 0.0, 10) == 0.0
    peak = max(range(1, 100), key=lambda s: noam_lr(s, 16, 1.0, 20))
    assert peak == 20


def test_batch_accuracy_counts_real_rows_only():
    chunk = Chunk("x", 0, np.zeros((5, IN_DIM)), np.zeros((0, 5), dtype=np.int8))
    _, acc = batch_loss(build_model(tiny_cfg()), [chunk], backward=False)
    assert acc == 1.0


# --- chunking ---------------------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 2000), st.integers(1, 600))
def test_chunk_lengths_sum_to_sequence(n_frames, chunk):
    bounds = chunk_bounds(n_frames, chunk)
    assert sum(hi - lo for lo, hi in bounds) == n_frames
    assert all(b[1] == c[0] for b, c in zip(bounds, bounds[1:]))
    assert all(0 < hi - lo <= chunk for lo, hi in bounds)


def test_chunks_drop_silent_speakers():
    spk = np.zeros((2, 30), dtype=np.int8)
    spk[0, :5] = 1
    spk[1, 25:] = 1
    chunks = make_chunks([Sequence("m", np.zeros((30, IN_DIM)), spk, ["a", "b"])], 10)
    assert [c.speakers.shape[0] for c in chunks] == [1, 0, 1]
    assert [c.start for c in chunks] == [0, 10, 20]


# --- fit / adapt --------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return write_corpus(SimConfig(target_duration_s=6.0, seed=4), 3, out)


def test_empty_manifest(tmp_path):
    (tmp_path / "m.txt").write_text("")
    with pytest.raises(ValueError, match="no training data"):
        fit(tmp_path / "m.txt", tiny_train_cfg(), tiny_cfg(), FEAT, tmp_path / "out")


def test_missing_manifest(tmp_path):
    with pytest.raises(OSError, match="nope.txt"):
        fit(tmp_path / "nope.txt", tiny_train_cfg(), tiny_cfg(), FEAT, tmp_path / "out")


def test_manifest_sequences_shapes(corpus):
    seqs = load_manifest_sequences(corpus, FEAT)
    assert len(seqs) == 3
    for s in seqs:
        assert s.features.shape[1] == IN_DIM
        assert s.speakers.shape[1] == s.features.shape[0]


def test_fit_writes_checkpoints_and_metrics(corpus, tmp_path):
    last = fit(corpus, tiny_train_cfg(max_epochs=2), tiny_cfg(), FEAT, tmp_path)
    assert last.name == "epoch002.chk" and (tmp_path / "epoch001.chk").exists()
    records = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == list(range(1, len(records) + 1))
    assert {"step", "l_sub", "l_pit", "total", "lr", "tf_accuracy"} <= set(records[0])
    timing = [json.loads(line) for line in (tmp_path / "timing.jsonl").read_text().splitlines()]
    assert [t["step"] for t in timing] == [r["step"] for r in records]
    _, header = load_checkpoint(last)
    assert header["step"] == records[-1]["step"] and header["epoch"] == 2


def test_resume_replays_identically(tmp_path):
    seqs = random_sequences(3)
    cfg = tiny_train_cfg(max_epochs=3)
    full = fit(None, cfg, tiny_cfg(), FEAT, tmp_path / "a", sequences=seqs)
    resumed = fit(None, cfg, tiny_cfg(), FEAT, tmp_path / "b", resume=tmp_path / "a" / "epoch001.chk", sequences=seqs)
    assert full.read_bytes() == resumed.read_bytes()
    a = (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()
    b = (tmp_path / "b" / "metrics.jsonl").read_text().splitlines()
    assert a[-len(b) :] == b and json.loads(b[0])["epoch"] == 2


def test_resume_in_place_truncates_log(tmp_path):
    seqs = random_sequences(2)
    cfg = tiny_train_cfg(max_epochs=2)
    fit(None, cfg, tiny_cfg(), FEAT, tmp_path / "a", sequences=seqs)
    reference = (tmp_path / "a" / "metrics.jsonl").read_text()
    fit(None, cfg, tiny_cfg(), FEAT, tmp_path / "a", resume=tmp_path / "a" / "epoch001.chk", sequences=seqs)
    assert (tmp_path / "a" / "metrics.jsonl").read_text() == reference


def test_fit_rejects_incompatible_resume(tmp_path):
    seqs = random_sequences(1)
    ck = fit(None, tiny_train_cfg(max_epochs=1), tiny_cfg(), FEAT, tmp_path / "a", sequences=seqs)
    with pytest.raises(ValueError, match="model config mismatch"):
        fit(None, tiny_train_cfg(), tiny_cfg(d_model=16), FEAT, tmp_path / "b", resume=ck, sequences=seqs)


def test_neutral_adaptation_equals_fit_with_init(tmp_path):
    seqs = random_sequences(2)
    base = fit(None, tiny_train_cfg(max_epochs=1), tiny_cfg(), FEAT, tmp_path / "base", sequences=seqs)
    neutral = tiny_train_cfg(max_epochs=1, adaptation=AdaptationPolicy(0.0, 1.0))
    a = adapt(base, None, neutral, None, tmp_path / "adapted", sequences=seqs)
    b = fit(None, tiny_train_cfg(max_epochs=1), tiny_cfg(), FEAT, tmp_path / "plain", init=base, sequences=seqs)
    ta, _ = load_checkpoint(a)
    tb, _ = load_checkpoint(b)
    assert ta.keys() == tb.keys()
    for name in ta:
        assert np.array_equal(ta[name], tb[name]), name


def test_adaptation_policy_logged(tmp_path):
    seqs = random_sequences(2)
    base = fit(None, tiny_train_cfg(max_epochs=1), tiny_cfg(), FEAT, tmp_path / "base", sequences=seqs)
    cfg = tiny_train_cfg(max_epochs=1, adaptation=AdaptationPolicy())
    adapt(base, None, cfg, None, tmp_path / "ad", sequences=seqs)
    rec = json.loads((tmp_path / "ad" / "metrics.jsonl").read_text().splitlines()[0])
    assert rec["frame_drop_ratio"] == 0.7 and rec["subtask_weight"] == 0.1
    assert rec["effective_subtask_scale"] == pytest.approx(0.03)


def test_adapt_rejects_feature_mismatch(tmp_path):
    seqs = random_sequences(1)
    base = fit(None, tiny_train_cfg(max_epochs=1), tiny_cfg(), FEAT, tmp_path / "base", sequences=seqs)
    with pytest.raises(ValueError, match="feature config mismatch"):
        adapt(base, None, tiny_train_cfg(), FeatureConfig(n_mels=5, context=1), tmp_path / "x", sequences=seqs)


def test_drop_mask_rng_replay():
    chunk = chunks_of(random_sequences(1))[0]
    policy = AdaptationPolicy()
    cfg = tiny_train_cfg(adaptation=policy, lr_scale=0.0)
    model = build_model(tiny_cfg(), 0)
    opt = OptimizerState.for_model(model)
    for step in (1, 2, 3):
        expected, _ = batch_loss(model, [chunk], policy, drop_rng(cfg.seed, step), backward=False)
        other, _ = batch_loss(model, [chunk], policy, drop_rng(cfg.seed, step + 10), backward=False)
        got, _ = train_step(model, opt, [chunk], cfg)
        assert got.l_sub == expected.l_sub
        assert got.l_sub != other.l_sub
    masks = [drop_mask(policy, ("sad",), 50, drop_rng(0, s)) for s in (1, 2)]
    assert not np.array_equal(*masks)


def test_gradient_check_after_training():
    model, x, sub, refs, n_real = random_problem(5, d_model=16)
    speakers = refs[0, :2].numpy().astype(np.int8)
    chunk = Chunk("x", 0, x[0].numpy(), speakers)
    opt = OptimizerState.for_model(model)
    cfg = TrainConfig(lr_scale=1.0, warmup_steps=10, seed=1)
    first = train_step(model, opt, [chunk], cfg)[0].total
    for _ in range(99):
        last = train_step(model, opt, [chunk], cfg)[0].total
    assert last < first
    assert gradient_check(model, x, sub, refs, n_real, n_params=20, seed=9) < 1e-4
