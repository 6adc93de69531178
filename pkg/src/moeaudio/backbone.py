"""Tiny pre-norm causal decoder fed with adapted audio frames followed by token embeddings.

Sequences of a batch are packed into one long row block with a block-diagonal
causal mask, so a whole batch is a single graph regardless of how many
sequences it holds.
"""

from __future__ import annotations

import enum
import math
import queue
import threading
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import numerics as nx
from .adapter import AdapterConfig, ConfigError, RoutingReport, adapt, aux_loss, init_adapter_params
from .numerics import Node, Tensor


class LengthError(ValueError):
    pass


class ContractError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    text_vocab: int
    audio_vocab: int
    d_model: int
    n_layers: int = 2
    n_heads: int = 2
    max_seq_len: int = 64
    d_ff: int | None = None
    tie_embeddings: bool = False
    final_norm: bool = True

    def __post_init__(self):
        if self.text_vocab < 1 or self.audio_vocab < 0:
            raise ConfigError("text_vocab must be >= 1 and audio_vocab >= 0")
        if self.d_model < 1 or self.n_heads < 1 or self.n_layers < 0 or self.max_seq_len < 1:
            raise ConfigError("d_model, n_heads, max_seq_len must be >= 1 and n_layers >= 0")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def vocab_size(self) -> int:
        return self.text_vocab + self.audio_vocab

    @property
    def ffn_width(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def audio_ids(self) -> range:
        return range(self.text_vocab, self.vocab_size)

    @property
    def text_ids(self) -> range:
        return range(0, self.text_vocab)


@dataclass
class Sequence:
    """One training example: optional acoustic frames, then token ids.

    ``loss_mask[j]`` marks token ``j`` as a supervised target; it is predicted
    from the position just before it, which may be the last frame.
    """

    token_ids: np.ndarray
    loss_mask: np.ndarray
    frames: Tensor | None = None
    task: str | None = None
    segments: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64).reshape(-1)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool).reshape(-1)
        if self.frames is not None:
            self.frames = nx.as_tensor(self.frames)
            if self.frames.ndim != 2:
                raise ContractError(f"frames must be (T_a, d_in), got {self.frames.shape}")
        if self.loss_mask.shape != self.token_ids.shape:
            raise ContractError("loss_mask and token_ids differ in length")
        if self.num_frames == 0 and self.loss_mask.size and self.loss_mask[0]:
            raise ContractError("first token has no preceding position to predict it from")

    @property
    def num_frames(self) -> int:
        return 0 if self.frames is None else self.frames.shape[0]

    def __len__(self) -> int:
        return self.num_frames + self.token_ids.size

    def targets(self) -> tuple[np.ndarray, np.ndarray]:
        """(predicting position, target id) for every supervised token."""
        j = np.nonzero(self.loss_mask)[0]
        return self.num_frames + j - 1, self.token_ids[j]


@dataclass
class SequenceBatch:
    sequences: list[Sequence]

    def __post_init__(self):
        if not self.sequences:
            raise ContractError("empty batch")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def offsets(self) -> np.ndarray:
        return np.cumsum([0] + [len(s) for s in self.sequences])

    def packed_targets(self) -> tuple[np.ndarray, np.ndarray]:
        pos, tgt = [], []
        for off, seq in zip(self.offsets, self.sequences):
            p, t = seq.targets()
            pos.append(p + off)
            tgt.append(t)
        return np.concatenate(pos), np.concatenate(tgt)

    def num_supervised(self) -> int:
        return int(sum(s.loss_mask.sum() for s in self.sequences))


class Stage(enum.Enum):
    ALIGN = "align"
    JOINT_PRETRAIN = "joint_pretrain"
    SFT = "sft"

    @property
    def trainable(self) -> frozenset[str]:
        if self is Stage.ALIGN:
            return frozenset({"adapter"})
        return frozenset({"adapter", "backbone"})

    @property
    def frozen(self) -> frozenset[str]:
        return frozenset({"adapter", "backbone"}) - self.trainable


@dataclass
class ToyAudioLM:
    adapter_config: AdapterConfig
    backbone_config: BackboneConfig
    adapter: dict[str, Node]
    backbone: dict[str, Node]

    @classmethod
    def create(cls, adapter_config: AdapterConfig, backbone_config: BackboneConfig, seed: int = 0) -> "ToyAudioLM":
        if adapter_config.d_out != backbone_config.d_model:
            raise ConfigError(f"adapter d_out={adapter_config.d_out} != backbone d_model={backbone_config.d_model}")
        rng = np.random.default_rng(seed)
        return cls(adapter_config, backbone_config,
                   init_adapter_params(adapter_config, rng),
                   init_backbone_params(backbone_config, rng))

    def groups(self) -> dict[str, dict[str, Node]]:
        return {"adapter": self.adapter, "backbone": self.backbone}

    def named_parameters(self) -> Iterator[tuple[str, Node]]:
        for group, params in self.groups().items():
            for name, node in params.items():
                yield f"{group}/{name}", node

    def snapshot(self) -> dict[str, Tensor]:
        return {name: node.value.copy() for name, node in self.named_parameters()}


def init_backbone_params(config: BackboneConfig, rng: np.random.Generator) -> dict[str, Node]:
    d, V, f = config.d_model, config.vocab_size, config.ffn_width

    def normal(*shape, std=None):
        std = std if std is not None else 1.0 / math.sqrt(shape[0])
        return nx.parameter(rng.normal(0.0, std, size=shape))

    params = {
        "tok_emb": normal(V, d, std=0.5),
        "pos_emb": normal(config.max_seq_len, d, std=0.1),
    }
    for i in range(config.n_layers):
        p = f"layer.{i}."
        params[p + "ln1.gamma"] = nx.parameter(np.ones((1, d)))
        params[p + "ln1.beta"] = nx.parameter(np.zeros((1, d)))
        for w in ("wq", "wk", "wv", "wo"):
            params[p + "attn." + w] = normal(d, d)
        params[p + "ln2.gamma"] = nx.parameter(np.ones((1, d)))
        params[p + "ln2.beta"] = nx.parameter(np.zeros((1, d)))
        params[p + "ffn.w1"] = normal(d, f)
        params[p + "ffn.b1"] = nx.parameter(np.zeros((1, f)))
        params[p + "ffn.w2"] = normal(f, d)
        params[p + "ffn.b2"] = nx.parameter(np.zeros((1, d)))
    if config.final_norm:
        params["final_ln.gamma"] = nx.parameter(np.ones((1, d)))
        params["final_ln.beta"] = nx.parameter(np.zeros((1, d)))
    if not config.tie_embeddings:
        params["head.w"] = normal(d, V)
    params["head.b"] = nx.parameter(np.zeros((1, V)))
    return params


def block_causal_mask(lengths: Iterable[int]) -> np.ndarray:
    lengths = list(lengths)
    owner = np.repeat(np.arange(len(lengths)), lengths)
    n = owner.size
    return (owner[:, None] == owner[None, :]) & np.tri(n, dtype=bool)


def _embed(batch: SequenceBatch, model: ToyAudioLM) -> tuple[Node, RoutingReport | None]:
    cfg = model.backbone_config
    frame_blocks = [s.frames for s in batch.sequences if s.frames is not None]
    token_ids = np.concatenate([s.token_ids for s in batch.sequences])
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= cfg.vocab_size):
        raise ContractError(f"token id outside vocabulary of size {cfg.vocab_size}")

    sources, report = [], None
    n_frames = 0
    if frame_blocks:
        frames = np.concatenate(frame_blocks, axis=0)
        n_frames = frames.shape[0]
        adapted, report = adapt(nx.constant(frames), model.adapter, model.adapter_config)
        sources.append(adapted)
    if token_ids.size:
        sources.append(nx.take_rows(model.backbone["tok_emb"], token_ids))

    # map every packed position to its row in [adapted frames; token embeddings]
    order, positions = [], []
    frame_cursor, token_cursor = 0, n_frames
    for seq in batch.sequences:
        order.extend(range(frame_cursor, frame_cursor + seq.num_frames))
        frame_cursor += seq.num_frames
        order.extend(range(token_cursor, token_cursor + seq.token_ids.size))
        token_cursor += seq.token_ids.size
        positions.extend(range(len(seq)))
    stacked = sources[0] if len(sources) == 1 else nx.concat_rows(sources)
    z = nx.take_rows(stacked, order)
    return nx.add(z, nx.take_rows(model.backbone["pos_emb"], positions)), report


def _attention(h: Node, params: dict[str, Node], prefix: str, n_heads: int, mask: np.ndarray) -> Node:
    d = h.shape[1]
    dh = d // n_heads
    q = nx.matmul(h, params[prefix + "wq"])
    k = nx.matmul(h, params[prefix + "wk"])
    v = nx.matmul(h, params[prefix + "wv"])
    heads = []
    for i in range(n_heads):
        lo, hi = i * dh, (i + 1) * dh
        scores = nx.scale(nx.matmul(nx.slice_cols(q, lo, hi), nx.transpose(nx.slice_cols(k, lo, hi))),
                          1.0 / math.sqrt(dh))
        heads.append(nx.matmul(nx.softmax(scores, mask), nx.slice_cols(v, lo, hi)))
    merged = heads[0] if n_heads == 1 else nx.concat_cols(heads)
    return nx.matmul(merged, params[prefix + "wo"])


def forward(batch: SequenceBatch, model: ToyAudioLM) -> tuple[Node, RoutingReport | None]:
    """Packed logits ``(sum of sequence lengths, V)`` and the adapter's routing report."""
    cfg = model.backbone_config
    for seq in batch.sequences:
        if len(seq) > cfg.max_seq_len:
            raise LengthError(f"sequence of length {len(seq)} exceeds max_seq_len={cfg.max_seq_len}")
    p = model.backbone
    h, report = _embed(batch, model)
    mask = block_causal_mask(len(s) for s in batch.sequences)
    for i in range(cfg.n_layers):
        pre = f"layer.{i}."
        a = nx.layer_norm(h, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
        h = nx.add(h, _attention(a, p, pre + "attn.", cfg.n_heads, mask))
        m = nx.layer_norm(h, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
        m = nx.silu(nx.add(nx.matmul(m, p[pre + "ffn.w1"]), p[pre + "ffn.b1"]))
        h = nx.add(h, nx.add(nx.matmul(m, p[pre + "ffn.w2"]), p[pre + "ffn.b2"]))
    if cfg.final_norm:
        h = nx.layer_norm(h, p["final_ln.gamma"], p["final_ln.beta"])
    head = nx.transpose(p["tok_emb"]) if cfg.tie_embeddings else p["head.w"]
    return nx.add(nx.matmul(h, head), p["head.b"]), report


def ntp_loss(logits: Node, batch: SequenceBatch) -> Node:
    """Mean next-token negative log-likelihood over the batch's supervised positions."""
    if batch.num_supervised() == 0:
        raise ContractError("loss mask selects no positions")
    positions, targets = batch.packed_targets()
    return nx.cross_entropy(nx.take_rows(logits, positions), targets)


@dataclass
class Losses:
    total: Node
    ntp: Node
    aux: Node
    report: RoutingReport | None


def compute_losses(batch: SequenceBatch, model: ToyAudioLM, aux_weight: float | None = None) -> Losses:
    """NTP loss plus ``aux_weight`` times the load-balancing penalty of this batch's routing."""
    weight = model.adapter_config.aux_weight if aux_weight is None else aux_weight
    logits, report = forward(batch, model)
    ntp = ntp_loss(logits, batch)
    aux = aux_loss(report) if report is not None else nx.constant([0.0])
    if weight == 0:
        return Losses(ntp, ntp, aux, report)
    return Losses(nx.add(ntp, nx.scale(aux, weight)), ntp, aux, report)


def combine_losses(ntp: float, aux: float, aux_weight: float) -> float:
    return ntp if aux_weight == 0 else ntp + aux_weight * aux


@dataclass
class OptimizerConfig:
    """Plain SGD, or an Adam-style rule (``beta1=0`` makes it momentum-free)."""

    kind: str = "sgd"
    lr: float = 0.05
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


def _apply_update(name: str, node: Node, opt: OptimizerConfig, state: OptimizerState) -> None:
    g = node.grad
    if opt.kind == "sgd":
        node.value = node.value - opt.lr * g
        return
    m = state.m.get(name, np.zeros_like(g))
    v = state.v.get(name, np.zeros_like(g))
    m = opt.beta1 * m + (1 - opt.beta1) * g
    v = opt.beta2 * v + (1 - opt.beta2) * g * g
    state.m[name], state.v[name] = m, v
    t = state.step
    m_hat = m / (1 - opt.beta1 ** t) if opt.beta1 > 0 else m
    v_hat = v / (1 - opt.beta2 ** t)
    node.value = node.value - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)


def train_step(batch: SequenceBatch, stage: Stage, model: ToyAudioLM,
               opt: OptimizerConfig, state: OptimizerState, aux_weight: float | None = None) -> dict:
    """One optimisation step; parameters of frozen groups are left untouched."""
    for group, params in model.groups().items():
        trainable = group in stage.trainable
        for node in params.values():
            node.requires_grad = trainable
            node.zero_grad()
    losses = compute_losses(batch, model, aux_weight)
    value = losses.total.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss at step {state.step + 1}: total={value}, "
                            f"ntp={losses.ntp.item()}, aux={losses.aux.item()}")
    losses.total.backward()
    state.step += 1
    for group in sorted(stage.trainable):
        for name, node in model.groups()[group].items():
            _apply_update(f"{group}/{name}", node, opt, state)
    util = losses.report.fractions.tolist() if losses.report is not None else []
    return {
        "step": state.step,
        "stage": stage.value,
        "loss": value,
        "l_ntp": losses.ntp.item(),
        "l_aux": losses.aux.item(),
        "utilization": util,
    }


def prefetch(batches: Iterable, maxsize: int = 2) -> Iterator:
    """Produce ``batches`` on a background thread through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    done = object()
    errors: list[BaseException] = []

    def worker():
        try:
            for b in batches:
                q.put(b)
        except BaseException as exc:  # re-raised on the consumer side
            errors.append(exc)
        finally:
            q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    if errors:
        raise errors[0]
