"""Subtask-first speaker-wise conditional diarization network.

A shared Transformer encoder maps features to embeddings ``E``.  A frame-wise
LSTM then runs along the *chain* axis: first one step per subtask (SAD, OD),
then one step per speaker.  Each step sees ``[E, f(previous decision)]`` and
is decoded by a per-subtask linear head or the shared speaker head.

Tensors are batch/time-major: features ``(B, T, F)``, embeddings
``(B, T, D)``, chain outputs ``(B, steps, T)``.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from chaindiar.labels import SubtaskKind

DTYPE = torch.float64
MAGIC = b"CHAINDIAR1\n"

CONDITIONAL_CHAIN = "conditional_chain"
PARALLEL_MULTITASK = "parallel_multitask"


@dataclass
class ModelConfig:
    input_dim: int
    d_model: int = 256
    n_heads: int = 4
    n_blocks: int = 4
    subtasks: tuple = ()
    max_speakers: int = 4
    variant: str = CONDITIONAL_CHAIN
    positional_encoding: bool = False
    ffn_dim: int | None = None

    def __post_init__(self):
        self.subtasks = tuple(SubtaskKind(k) for k in self.subtasks)
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_speakers < 1:
            raise ValueError("max_speakers must be >= 1")
        if self.variant not in (CONDITIONAL_CHAIN, PARALLEL_MULTITASK):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.d_model

    @property
    def n_subtasks(self) -> int:
        return len(self.subtasks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["subtasks"] = [k.value for k in self.subtasks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# --- encoder ------------------------------------------------------------------


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.query = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.key = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.value = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.out = nn.Linear(d_model, d_model, dtype=DTYPE)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, x, return_weights: bool = False):
        b, t, d = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        weights = torch.softmax(scores, dim=-1)  # (B, H, T, T)
        ctx = (weights @ v).transpose(1, 2).reshape(b, t, d)
        out = self.out(ctx)
        return (out, weights) if return_weights else out


class EncoderBlock(nn.Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d_model, dtype=DTYPE)
        self.attn = MultiHeadSelfAttention(d_model, n_heads)
        self.norm_ffn = nn.LayerNorm(d_model, dtype=DTYPE)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, ffn_dim, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(ffn_dim, d_model, dtype=DTYPE),
        )

    def forward(self, x):
        x = x + self.attn(self.norm_attn(x))
        return x + self.ffn(self.norm_ffn(x))


def sinusoidal_positions(n_frames: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(n_frames, dtype=DTYPE)[:, None]
    rate = torch.exp(torch.arange(0, d_model, 2, dtype=DTYPE) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(n_frames, d_model, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(pos * rate)
    pe[:, 1::2] = torch.cos(pos * rate)[:, : d_model // 2]
    return pe


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.input_proj = nn.Linear(cfg.input_dim, cfg.d_model, dtype=DTYPE)
        self.input_norm = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.d_model, cfg.n_heads, cfg.ffn_dim) for _ in range(cfg.n_blocks)
        )
        self.final_norm = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.positional_encoding = cfg.positional_encoding

    def forward(self, x):
        h = self.input_norm(self.input_proj(x))
        if self.positional_encoding:
            h = h + sinusoidal_positions(h.shape[1], h.shape[2])
        for block in self.blocks:
            h = block(h)
        return self.final_norm(h)


# --- conditional chain ----------------------------------------------------------


class ChainLSTMCell(nn.Module):
    """LSTM cell with gate order (input, forget, cell, output).

    Applied independently to every frame; the recurrence runs over chain steps.
    """

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.weight_ih = nn.Parameter(torch.empty(4 * hidden_dim, input_dim, dtype=DTYPE))
        self.weight_hh = nn.Parameter(torch.empty(4 * hidden_dim, hidden_dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.empty(4 * hidden_dim, dtype=DTYPE))
        self.reset_parameters()

    def reset_parameters(self):
        bound = 1.0 / math.sqrt(self.hidden_dim)
        for p in (self.weight_ih, self.weight_hh, self.bias):
            nn.init.uniform_(p, -bound, bound)
        with torch.no_grad():
            self.bias[self.hidden_dim : 2 * self.hidden_dim] += 1.0

    def forward(self, inp, state):
        h, c = state
        gates = inp @ self.weight_ih.T + h @ self.weight_hh.T + self.bias
        i, f, g, o = gates.chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class Chain(nn.Module):
    """One conditional chain: condition embedding f plus the chain LSTM."""

    def __init__(self, d_model: int):
        super().__init__()
        self.condition = nn.Linear(1, d_model, dtype=DTYPE)
        self.cell = ChainLSTMCell(2 * d_model, d_model)

    def embed_condition(self, c):
        return self.condition(c.to(DTYPE).unsqueeze(-1))

    def zero_state(self, emb):
        zeros = torch.zeros_like(emb)
        return zeros, zeros

    def step(self, emb, condition, state):
        if condition.shape != emb.shape[:-1]:
            raise ValueError(f"condition shape {tuple(condition.shape)} does not match frames {tuple(emb.shape[:-1])}")
        h, c = self.cell(torch.cat([emb, self.embed_condition(condition)], dim=-1), state)
        return h, (h, c)


@dataclass
class ChainOutputs:
    """Logits and decisions; probabilities are sigmoid(logits)."""

    subtask_logits: torch.Tensor  # (B, K, T)
    speaker_logits: torch.Tensor  # (B, S, T)
    subtask_decisions: torch.Tensor
    speaker_decisions: torch.Tensor
    n_speakers: list = field(default_factory=list)

    @property
    def subtask_probs(self):
        return torch.sigmoid(self.subtask_logits)

    @property
    def speaker_probs(self):
        return torch.sigmoid(self.speaker_logits)


def decide(logits):
    # sigmoid(x) > 0.5  <=>  x > 0
    return (logits.detach() > 0).to(DTYPE)


class ChainDiarizer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.encoder = TransformerEncoder(cfg)
        self.chain = Chain(d)
        if cfg.variant == PARALLEL_MULTITASK:
            self.speaker_chain = Chain(d)
        self.subtask_decoders = nn.ModuleDict({k.value: nn.Linear(d, 1, dtype=DTYPE) for k in cfg.subtasks})
        self.speaker_decoder = nn.Linear(d, 1, dtype=DTYPE)

    # pieces, overridable in tests

    def encode(self, x):
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.ndim == 2:
            x = x.unsqueeze(0)
        if x.shape[-1] != self.cfg.input_dim:
            raise ValueError(f"expected {self.cfg.input_dim} input features, got {x.shape[-1]}")
        return self.encoder(x)

    def chain_step(self, chain: Chain, emb, condition, state):
        return chain.step(emb, condition, state)

    def subtask_logit(self, h, k: int):
        return self.subtask_decoders[self.cfg.subtasks[k].value](h).squeeze(-1)

    def speaker_logit(self, h, s: int):
        return self.speaker_decoder(h).squeeze(-1)

    # chain decoding

    def _speaker_chain(self) -> Chain:
        return self.speaker_chain if self.cfg.variant == PARALLEL_MULTITASK else self.chain

    def run_subtasks(self, emb, subtask_refs=None):
        """Decode the K subtask steps; returns (logits, decisions, state, last condition)."""
        b, t, _ = emb.shape
        cond = torch.zeros(b, t, dtype=DTYPE)
        state = self.chain.zero_state(emb)
        logits, decisions = [], []
        for k in range(self.cfg.n_subtasks):
            h, state = self.chain_step(self.chain, emb, cond, state)
            logit = self.subtask_logit(h, k)
            logits.append(logit)
            decisions.append(decide(logit))
            cond = decisions[-1] if subtask_refs is None else subtask_refs[:, k]
        return _stack(logits, b, t), _stack(decisions, b, t), state, cond

    def _speaker_start(self, emb, cond, state):
        if self.cfg.variant == PARALLEL_MULTITASK:
            return torch.zeros(emb.shape[:-1], dtype=DTYPE), self.speaker_chain.zero_state(emb)
        return cond, state

    def forward(self, x, n_speaker_steps: int | None = None, subtask_refs=None, speaker_refs=None):
        """Teacher-forced when references are given, otherwise free-running.

        In teacher-forced mode the number of speaker steps equals the number
        of reference rows.  One step beyond ``max_speakers`` is allowed for
        the all-silent stop row.
        """
        emb = self.encode(x)
        b, t, _ = emb.shape
        teacher = speaker_refs is not None
        if teacher:
            speaker_refs = torch.as_tensor(speaker_refs, dtype=DTYPE).reshape(b, -1, t)
            n_speaker_steps = speaker_refs.shape[1]
            if self.cfg.n_subtasks:
                if subtask_refs is None:
                    raise ValueError("teacher forcing needs subtask references")
                subtask_refs = torch.as_tensor(subtask_refs, dtype=DTYPE).reshape(b, -1, t)
        else:
            subtask_refs = None
        if n_speaker_steps is None:
            n_speaker_steps = self.cfg.max_speakers
        if n_speaker_steps > self.cfg.max_speakers + 1:
            raise ValueError(f"{n_speaker_steps} speaker steps exceed max_speakers={self.cfg.max_speakers}")

        sub_logits, sub_dec, state, cond = self.run_subtasks(emb, subtask_refs)
        cond, state = self._speaker_start(emb, cond, state)
        chain = self._speaker_chain()
        logits, decisions = [], []
        for s in range(n_speaker_steps):
            h, state = self.chain_step(chain, emb, cond, state)
            logits.append(self.speaker_logit(h, s))
            decisions.append(decide(logits[-1]))
            cond = speaker_refs[:, s] if teacher else decisions[-1]
        return ChainOutputs(sub_logits, _stack(logits, b, t), sub_dec, _stack(decisions, b, t))

    @torch.no_grad()
    def infer(self, x, sad_override: bool = False, max_speakers: int | None = None) -> ChainOutputs:
        """Free-running decoding of one sequence, stopping at the first all-silent speaker."""
        limit = self.cfg.max_speakers if max_speakers is None else min(max_speakers, self.cfg.max_speakers)
        emb = self.encode(x)
        if emb.shape[0] != 1:
            raise ValueError("infer decodes one sequence at a time")
        b, t, _ = emb.shape
        sub_logits, sub_dec, state, cond = self.run_subtasks(emb)
        cond, state = self._speaker_start(emb, cond, state)
        chain = self._speaker_chain()
        logits, decisions = [], []
        for s in range(limit):
            h, state = self.chain_step(chain, emb, cond, state)
            logit = self.speaker_logit(h, s)
            cond = decide(logit)
            if not cond.any():
                break
            logits.append(logit)
            decisions.append(cond)
        spk_logits = _stack(logits, b, t)
        spk_dec = _stack(decisions, b, t)
        if sad_override and SubtaskKind.SAD in self.cfg.subtasks:
            sad = sub_dec[:, self.cfg.subtasks.index(SubtaskKind.SAD)]
            spk_dec = spk_dec * sad.unsqueeze(1)
        n_active = int(spk_dec[0].any(dim=-1).sum())
        return ChainOutputs(sub_logits, spk_logits, sub_dec, spk_dec, [n_active])


def _stack(rows, b, t):
    if not rows:
        return torch.zeros(b, 0, t, dtype=DTYPE)
    return torch.stack(rows, dim=1)


def build_model(cfg: ModelConfig, seed: int = 0) -> ChainDiarizer:
    torch.manual_seed(seed)
    return ChainDiarizer(cfg)


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, tensors: dict, header: dict) -> None:
    """Write ``MAGIC``, a length-prefixed JSON header and raw little-endian float64 data.

    The header lists tensor names and shapes in storage order.
    """
    names = list(tensors)
    arrays = [np.ascontiguousarray(_to_numpy(tensors[n]), dtype="<f8") for n in names]
    header = dict(header)
    header["tensors"] = [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for a in arrays:
            f.write(a.tobytes(order="C"))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (tensors as float64 numpy arrays, header)."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos : pos + n].decode("utf-8"))
    pos += n
    tensors = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(spec["shape"])
        tensors[spec["name"]] = arr.copy()
        pos += 8 * count
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after tensor data")
    return tensors, header


def _to_numpy(t):
    if isinstance(t, torch.Tensor):
        return t.detach().cpu().numpy()
    return np.asarray(t)


def model_tensors(model: ChainDiarizer) -> dict:
    return {f"param.{name}": p for name, p in model.named_parameters()}


def save_model(path, model: ChainDiarizer, extra_header: dict | None = None, extra_tensors: dict | None = None):
    header = {"format": "CHAINDIAR1", "model_config": model.cfg.to_dict()}
    header.update(extra_header or {})
    tensors = model_tensors(model)
    tensors.update(extra_tensors or {})
    save_checkpoint(path, tensors, header)


def load_model(path) -> tuple[ChainDiarizer, dict, dict]:
    """Returns (model, header, all tensors)."""
    tensors, header = load_checkpoint(path)
    model = ChainDiarizer(ModelConfig.from_dict(header["model_config"]))
    load_parameters(model, tensors)
    return model, header, tensors


def load_parameters(model: ChainDiarizer, tensors: dict) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param.{name}"
            if key not in tensors:
                raise ValueError(f"checkpoint lacks parameter {name}")
            src = torch.from_numpy(np.asarray(tensors[key]))
            if tuple(src.shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for {name}: {tuple(src.shape)} vs {tuple(p.shape)}")
            p.copy_(src)
