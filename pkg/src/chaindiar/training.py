"""Training loop: data chunking, Adam with Noam warmup, checkpoints, adaptation."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from chaindiar.features import FeatureConfig, logmel_extract, read_wav, splice, subsample
from chaindiar.labels import subtask_references, threshold
from chaindiar.losses import AdaptationPolicy, LossBreakdown, pad_speaker_refs, two_stage_pit
from chaindiar.model import (
    DTYPE,
    ChainDiarizer,
    ModelConfig,
    build_model,
    load_checkpoint,
    load_parameters,
    save_model,
)
from chaindiar.scoring import read_rttm, segments_to_activity
from chaindiar.simulation import read_manifest

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
DROP_STREAM = 0xD50  # rng stream tag for adaptation frame dropping


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteGradient(RuntimeError):
    pass


@dataclass
class TrainConfig:
    chunk_frames: int = 500
    batch_size: int = 8
    max_epochs: int = 10
    lr_scale: float = 1.0
    warmup_steps: int = 250
    grad_clip: float = 5.0
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    adaptation: AdaptationPolicy | None = None

    def __post_init__(self):
        if isinstance(self.adaptation, dict):
            self.adaptation = AdaptationPolicy(**self.adaptation)
        for name in ("chunk_frames", "batch_size", "max_epochs", "warmup_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.grad_clip <= 0 or self.lr_scale < 0:
            raise ValueError("grad_clip must be positive and lr_scale non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.adaptation is not None:
            d["adaptation"] = {
                "frame_drop_ratio": self.adaptation.frame_drop_ratio,
                "subtask_weight": self.adaptation.subtask_weight,
                "applies_to": sorted(k.value for k in self.adaptation.applies_to),
            }
        return d


# --- data -----------------------------------------------------------------------


@dataclass
class Sequence:
    mixture_id: str
    features: np.ndarray  # (T, F)
    speakers: np.ndarray  # (S, T), model frame rate
    speaker_names: list


@dataclass
class Chunk:
    mixture_id: str
    start: int
    features: np.ndarray  # (T, F)
    speakers: np.ndarray  # (S, T), silent speakers removed


def labels_at_feature_rate(segments, n_frames: int, frame_shift_s: float):
    end = max((s.end_s for s in segments), default=0.0)
    n_raster = max(n_frames, math.ceil(end / frame_shift_s) + 1)
    act, names = segments_to_activity(segments, frame_shift_s, n_raster, sorted({s.speaker for s in segments}))
    return act.rows[:, :n_frames], names


def load_sequence(mixture_id: str, wav_path, rttm_path, cfg: FeatureConfig) -> Sequence:
    try:
        wav = read_wav(wav_path)
        segments = read_rttm(rttm_path)
    except OSError as e:
        raise OSError(f"{e.filename or wav_path}: {e.strerror}") from e
    logmel = logmel_extract(wav, cfg)
    rows, names = labels_at_feature_rate(segments, logmel.n_frames, cfg.frame_shift_ms / 1000.0)
    feats = subsample(splice(logmel, cfg.context), cfg.subsample)
    return Sequence(mixture_id, feats.data.T.copy(), rows[:, :: cfg.subsample].copy(), names)


def load_manifest_sequences(manifest, cfg: FeatureConfig) -> list[Sequence]:
    entries = read_manifest(manifest)
    if not entries:
        raise ValueError("no training data")
    return [load_sequence(e.mixture_id, e.wav_path, e.rttm_path, cfg) for e in entries]


def chunk_bounds(n_frames: int, chunk_frames: int) -> list[tuple[int, int]]:
    return [(s, min(s + chunk_frames, n_frames)) for s in range(0, n_frames, chunk_frames)]


def make_chunks(sequences, chunk_frames: int) -> list[Chunk]:
    chunks = []
    for seq in sequences:
        for lo, hi in chunk_bounds(seq.features.shape[0], chunk_frames):
            spk = seq.speakers[:, lo:hi]
            chunks.append(Chunk(seq.mixture_id, lo, seq.features[lo:hi], spk[spk.any(axis=1)]))
    return chunks


# --- optimizer ------------------------------------------------------------------


def noam_lr(step: int, d_model: int, scale: float, warmup: int) -> float:
    step = max(step, 1)
    return scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: ChainDiarizer) -> "OptimizerState":
        m = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
        v = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
        return cls(0, m, v)


def adam_update(model: ChainDiarizer, opt: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bias1 = 1.0 - b1**opt.step
    bias2 = 1.0 - b2**opt.step
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = p.grad
            m, v = opt.m[name], opt.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(lr * (m / bias1) / ((v / bias2).sqrt() + cfg.adam_eps))


def gradients(model: ChainDiarizer) -> dict:
    """Named gradients after backward(); raises on NaN/inf with the parameter name."""
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
        grads[name] = g
    return grads


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g.mul_(max_norm / norm)
    return norm


# --- steps ------------------------------------------------------------------------


def batch_loss(model: ChainDiarizer, chunks, policy=None, rng=None, backward: bool = True):
    """Loss over a batch, grouped by chunk length; gradients accumulate into .grad.

    Returns (LossBreakdown averaged over items, teacher-forced frame accuracy).
    """
    n_rows = max(c.speakers.shape[0] for c in chunks) + 1
    groups = defaultdict(list)
    for i, c in enumerate(chunks):
        groups[c.features.shape[0]].append(i)
    l_sub = l_pit = 0.0
    perms = [None] * len(chunks)
    correct = counted = 0
    for n_frames in sorted(groups):
        idx = groups[n_frames]
        x = torch.from_numpy(np.stack([chunks[i].features for i in idx]))
        sub_refs = torch.from_numpy(
            np.stack([subtask_references(chunks[i].speakers, model.cfg.subtasks) for i in idx]).astype(np.float64)
        ).reshape(len(idx), model.cfg.n_subtasks, n_frames)
        spk_refs = pad_speaker_refs([chunks[i].speakers for i in idx], n_rows, n_frames)
        n_real = [chunks[i].speakers.shape[0] for i in idx]
        loss, out = two_stage_pit(model, x, sub_refs, spk_refs, policy, rng, n_real)
        weight = len(idx) / len(chunks)
        if backward:
            (loss.graph * weight).backward()
        l_sub += loss.l_sub * weight
        l_pit += loss.l_pit * weight
        for j, i in enumerate(idx):
            perms[i] = loss.best_perms[j]
            n_real = chunks[i].speakers.shape[0]
            ref = spk_refs[j, list(loss.best_perms[j])][:n_real].numpy()
            dec = out.speaker_decisions[j, :n_real].numpy()
            correct += int((ref == dec).sum())
            counted += ref.size
    accuracy = correct / counted if counted else 1.0
    return LossBreakdown(l_sub, l_pit, l_sub + l_pit, perms), accuracy


def drop_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, DROP_STREAM, step])


def train_step(model: ChainDiarizer, opt: OptimizerState, chunks, cfg: TrainConfig) -> tuple[LossBreakdown, dict]:
    """One optimizer update; mutates ``model`` and ``opt`` in place."""
    if not chunks:
        raise ValueError("empty batch")
    model.zero_grad(set_to_none=True)
    opt.step += 1
    rng = drop_rng(cfg.seed, opt.step) if cfg.adaptation is not None else None
    loss, accuracy = batch_loss(model, chunks, cfg.adaptation, rng)
    if not math.isfinite(loss.total) or loss.total > DIVERGENCE_LIMIT:
        raise TrainingDiverged(f"loss {loss.total!r} at step {opt.step} (l_sub={loss.l_sub!r}, l_pit={loss.l_pit!r})")
    grads = gradients(model)
    grad_norm = clip_global_norm(grads, cfg.grad_clip)
    lr = noam_lr(opt.step, model.cfg.d_model, cfg.lr_scale, cfg.warmup_steps)
    for name, p in model.named_parameters():
        p.grad = grads[name]
    adam_update(model, opt, lr, cfg)
    return loss, {"lr": lr, "grad_norm": grad_norm, "tf_accuracy": accuracy}


# --- checkpoints ------------------------------------------------------------------


def save_training_checkpoint(path, model, opt: OptimizerState, feature_cfg: FeatureConfig, cfg: TrainConfig, epoch: int):
    extra = {}
    for name in opt.m:
        extra[f"adam.m.{name}"] = opt.m[name]
        extra[f"adam.v.{name}"] = opt.v[name]
    header = {
        "feature_config": asdict(feature_cfg),
        "train_config": cfg.to_dict(),
        "epoch": epoch,
        "step": opt.step,
    }
    save_model(path, model, header, extra)


def restore_optimizer(model: ChainDiarizer, tensors: dict, step: int) -> OptimizerState:
    opt = OptimizerState.for_model(model)
    opt.step = step
    for name in opt.m:
        opt.m[name] = torch.from_numpy(tensors[f"adam.m.{name}"])
        opt.v[name] = torch.from_numpy(tensors[f"adam.v.{name}"])
    return opt


def check_compatible(header: dict, model_cfg: ModelConfig, feature_cfg: FeatureConfig) -> None:
    if header["model_config"] != model_cfg.to_dict():
        raise ValueError(f"model config mismatch: checkpoint {header['model_config']} vs requested {model_cfg.to_dict()}")
    saved = header.get("feature_config")
    if saved is not None and saved != asdict(feature_cfg):
        raise ValueError(f"feature config mismatch: checkpoint {saved} vs requested {asdict(feature_cfg)}")


# --- loops -------------------------------------------------------------------------


def _metrics_record(step, epoch, loss: LossBreakdown, info: dict, policy) -> dict:
    rec = {
        "step": step,
        "epoch": epoch,
        "l_sub": loss.l_sub,
        "l_pit": loss.l_pit,
        "total": loss.total,
        "lr": info["lr"],
        "grad_norm": info["grad_norm"],
        "tf_accuracy": info["tf_accuracy"],
    }
    if policy is not None:
        rec["frame_drop_ratio"] = policy.frame_drop_ratio
        rec["subtask_weight"] = policy.subtask_weight
        rec["effective_subtask_scale"] = policy.effective_scale
    return rec


def _truncate_log(path: Path, last_step: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if json.loads(line)["step"] <= last_step]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in keep))
    os.replace(tmp, path)


def fit(
    manifest,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    feature_cfg: FeatureConfig,
    out_dir,
    resume=None,
    init=None,
    sequences=None,
) -> Path:
    """Train and write ``epochNNN.chk`` per epoch plus ``metrics.jsonl``.

    ``resume`` continues from a training checkpoint (parameters, optimizer
    state, step).  ``init`` only loads parameters and starts a fresh run.
    Returns the last checkpoint path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if sequences is None:
        sequences = load_manifest_sequences(manifest, feature_cfg)
    if not sequences:
        raise ValueError("no training data")
    chunks = make_chunks(sequences, cfg.chunk_frames)

    torch.manual_seed(cfg.seed)
    model = build_model(model_cfg, cfg.seed)
    opt = OptimizerState.for_model(model)
    start_epoch = 0
    if resume is not None or init is not None:
        tensors, header = load_checkpoint(resume if resume is not None else init)
        check_compatible(header, model_cfg, feature_cfg)
        load_parameters(model, tensors)
        if resume is not None:
            opt = restore_optimizer(model, tensors, header["step"])
            start_epoch = header["epoch"]

    metrics_path = out_dir / "metrics.jsonl"
    timing_path = out_dir / "timing.jsonl"
    if resume is not None:
        _truncate_log(metrics_path, opt.step)
        _truncate_log(timing_path, opt.step)
    else:
        for p in (metrics_path, timing_path):
            p.unlink(missing_ok=True)

    last = None
    with open(metrics_path, "a") as metrics, open(timing_path, "a") as timing:
        for epoch in range(start_epoch, cfg.max_epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(chunks))
            for b in range(0, len(order), cfg.batch_size):
                batch = [chunks[i] for i in order[b : b + cfg.batch_size]]
                t0 = time.perf_counter()
                loss, info = train_step(model, opt, batch, cfg)
                wall_ms = (time.perf_counter() - t0) * 1000.0
                metrics.write(json.dumps(_metrics_record(opt.step, epoch + 1, loss, info, cfg.adaptation), sort_keys=True) + "\n")
                timing.write(json.dumps({"step": opt.step, "wall_ms": round(wall_ms, 3)}) + "\n")
            metrics.flush()
            timing.flush()
            last = out_dir / f"epoch{epoch + 1:03d}.chk"
            save_training_checkpoint(last, model, opt, feature_cfg, cfg, epoch + 1)
            logger.info("epoch %d done: step %d total %.4f", epoch + 1, opt.step, loss.total)
    if last is None:
        last = out_dir / f"epoch{cfg.max_epochs:03d}.chk"
    return last


def adapt(checkpoint, manifest, cfg: TrainConfig, feature_cfg: FeatureConfig | None, out_dir, sequences=None) -> Path:
    """Fine-tune a trained model with the adaptation policy applied to subtask losses."""
    tensors, header = load_checkpoint(checkpoint)
    model_cfg = ModelConfig.from_dict(header["model_config"])
    if feature_cfg is None:
        feature_cfg = FeatureConfig(**header["feature_config"])
    check_compatible(header, model_cfg, feature_cfg)
    return fit(manifest, cfg, model_cfg, feature_cfg, out_dir, init=checkpoint, sequences=sequences)


# --- evaluation helpers -------------------------------------------------------------


def diarize(model: ChainDiarizer, features: np.ndarray, sad_override: bool = False, max_speakers=None) -> np.ndarray:
    """Free-running inference on one (T, F) sequence; returns (S_hat, T) int8 decisions."""
    out = model.infer(torch.from_numpy(np.asarray(features, dtype=np.float64)), sad_override, max_speakers)
    return out.speaker_decisions[0].numpy().astype(np.int8)


@torch.no_grad()
def teacher_forced_accuracy(model: ChainDiarizer, chunks) -> float:
    correct = counted = 0
    for c in chunks:
        _, acc = batch_loss(model, [c], backward=False)
        correct += acc * c.speakers.size
        counted += c.speakers.size
    return correct / counted if counted else 1.0


def subtask_decisions(model: ChainDiarizer, features: np.ndarray) -> np.ndarray:
    out = model.infer(torch.from_numpy(np.asarray(features, dtype=DTYPE)))
    return threshold(out.subtask_probs[0].numpy())
