"""Shared builders for tests: tiny models, batches, and the whole-model gradient check."""

from __future__ import annotations

import numpy as np

from moeaudio.adapter import AdapterConfig
from moeaudio.backbone import BackboneConfig, Sequence, SequenceBatch, ToyAudioLM, compute_losses
from oracles import rel_err


def tiny_model(d_in=4, E=3, k=2, text_vocab=6, audio_vocab=4, d_model=8, n_layers=2, n_heads=2,
               hidden=5, aux_weight=0.01, seed=0, **backbone_kw) -> ToyAudioLM:
    ac = AdapterConfig(d_in=d_in, d_expert_hidden=hidden, d_out=d_model, num_experts=E, top_k=k,
                       aux_weight=aux_weight)
    bc = BackboneConfig(text_vocab=text_vocab, audio_vocab=audio_vocab, d_model=d_model, n_layers=n_layers,
                        n_heads=n_heads, max_seq_len=32, **backbone_kw)
    return ToyAudioLM.create(ac, bc, seed=seed)


def random_batch(model: ToyAudioLM, rng: np.random.Generator, n_seqs=2, max_frames=4, max_tokens=5) -> SequenceBatch:
    V = model.backbone_config.vocab_size
    seqs = []
    for i in range(n_seqs):
        n_tok = int(rng.integers(2, max_tokens + 1))
        ids = rng.integers(0, V, size=n_tok)
        if i % 2 == 0:
            frames = rng.normal(size=(int(rng.integers(1, max_frames + 1)), model.adapter_config.d_in))
            mask = np.ones(n_tok, dtype=bool)
        else:
            frames = None
            mask = np.r_[False, np.ones(n_tok - 1, dtype=bool)]
        seqs.append(Sequence(ids, mask, frames=frames))
    return SequenceBatch(seqs)


def model_gradcheck(model: ToyAudioLM, batch: SequenceBatch, aux_weight: float, rng: np.random.Generator,
                    per_tensor: int = 3, steps=(1e-3, 1e-4, 1e-5)) -> dict[str, float]:
    """Norm-wise relative error of analytic vs central-difference gradients, per parameter tensor.

    Each coordinate gets the fourth-order central stencil (+-h, +-2h) at every step
    size in ``steps``. Large steps suffer on sharply curved coordinates and small
    steps on tiny gradients, so the estimate comes from the adjacent pair of step
    sizes that agree best with each other; the analytic value plays no part in the
    choice. Step sizes whose perturbations change the top-k selection are dropped,
    and a coordinate needs two surviving step sizes to be compared.
    """
    for _, node in model.named_parameters():
        node.requires_grad = True
        node.zero_grad()
    losses = compute_losses(batch, model, aux_weight)
    losses.total.backward()
    base_sel = losses.report.selected.copy() if losses.report is not None else None

    def evaluate():
        out = compute_losses(batch, model, aux_weight)
        sel = out.report.selected if out.report is not None else None
        return out.total.item(), sel

    def stencil(node, idx, h):
        old = node.value[idx]
        values, stable = {}, True
        for step in (-2, -1, 1, 2):
            node.value[idx] = old + step * h
            values[step], sel = evaluate()
            stable &= base_sel is None or np.array_equal(sel, base_sel)
        node.value[idx] = old
        return (values[-2] - 8 * values[-1] + 8 * values[1] - values[2]) / (12 * h) if stable else None

    errors = {}
    for name, node in model.named_parameters():
        coords = list(np.ndindex(node.shape))
        picks = rng.choice(len(coords), size=min(per_tensor, len(coords)), replace=False)
        analytic, numeric = [], []
        for i in picks:
            idx = coords[i]
            estimates = [d for d in (stencil(node, idx, h) for h in steps) if d is not None]
            if len(estimates) < 2:
                continue
            pairs = list(zip(estimates[:-1], estimates[1:]))
            a, b = min(pairs, key=lambda p: abs(p[0] - p[1]))
            analytic.append(node.grad[idx])
            numeric.append(0.5 * (a + b))
        if analytic:
            # round-off in the difference quotient is about eps * |loss| / h ~ 1e-11, so
            # gradients whose norm is below 1e-6 are compared against that floor instead
            errors[name] = rel_err(analytic, numeric, floor=1e-6)
    return errors
