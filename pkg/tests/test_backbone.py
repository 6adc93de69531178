import math

import numpy as np
import pytest

from moeaudio import numerics as nx
from moeaudio.adapter import aux_loss
from moeaudio.backbone import (
    ContractError,
    LengthError,
    OptimizerConfig,
    OptimizerState,
    Sequence,
    SequenceBatch,
    Stage,
    TrainingError,
    block_causal_mask,
    combine_losses,
    compute_losses,
    forward,
    ntp_loss,
    prefetch,
    train_step,
)
from moeaudio.checkpoint import load_params, save_params
from helpers import model_gradcheck, random_batch, tiny_model
from oracles import ref_forward_sequence, ref_nll


def params_of(model):
    return {k: v.value for k, v in model.adapter.items()}, {k: v.value for k, v in model.backbone.items()}


def test_block_causal_mask():
    m = block_causal_mask([2, 3])
    assert m.shape == (5, 5)
    assert m[1, 0] and not m[0, 1]
    assert not m[2, 1] and m[4, 2]


def test_zero_layer_model_is_affine_in_embeddings():
    model = tiny_model(n_layers=0, final_norm=False)
    seq = Sequence([1, 4, 2], [False, True, True])
    logits, report = forward(SequenceBatch([seq]), model)
    B = params_of(model)[1]
    emb = B["tok_emb"][[1, 4, 2]] + B["pos_emb"][:3]
    assert report is None
    assert np.allclose(logits.value, emb @ B["head.w"] + B["head.b"], atol=1e-12)


@pytest.mark.parametrize("n_layers", [0, 1, 2])
def test_future_tokens_do_not_affect_past_logits(n_layers):
    model = tiny_model(n_layers=n_layers, seed=n_layers)
    rng = np.random.default_rng(3)
    frames = rng.normal(size=(3, 4))
    ids = np.array([1, 2, 3, 4, 5, 6])
    t = 3
    a = forward(SequenceBatch([Sequence(ids, np.ones(6, bool), frames)]), model)[0].value
    ids2 = ids.copy()
    ids2[t + 1:] = ids2[t + 1:][::-1]
    b = forward(SequenceBatch([Sequence(ids2, np.ones(6, bool), frames)]), model)[0].value
    upto = 3 + t + 1  # frames plus tokens 0..t
    assert np.array_equal(a[:upto], b[:upto])


def test_packed_forward_matches_independent_reference():
    model = tiny_model(d_model=8, n_layers=2, seed=4)
    rng = np.random.default_rng(5)
    batch = random_batch(model, rng, n_seqs=3)
    logits = forward(batch, model)[0].value
    A, B = params_of(model)
    for off, seq in zip(batch.offsets, batch.sequences):
        ref = ref_forward_sequence(seq.frames, seq.token_ids, A, B, model.adapter_config, model.backbone_config)
        assert np.max(np.abs(logits[off:off + len(seq)] - ref)) < 1e-9


def test_tied_embeddings_use_token_table():
    model = tiny_model(tie_embeddings=True, n_layers=1)
    assert "head.w" not in model.backbone
    batch = random_batch(model, np.random.default_rng(0))
    A, B = params_of(model)
    seq = batch.sequences[0]
    ref = ref_forward_sequence(seq.frames, seq.token_ids, A, B, model.adapter_config, model.backbone_config)
    assert np.allclose(forward(batch, model)[0].value[:len(seq)], ref, atol=1e-9)


@pytest.mark.parametrize("V", [2, 11, 97])
def test_uniform_logits_give_log_v(V):
    seq = Sequence(np.zeros(4, int), [False, True, True, True])
    loss = ntp_loss(nx.constant(np.zeros((4, V))), SequenceBatch([seq]))
    assert abs(loss.item() - math.log(V)) < 1e-12


def test_saturated_logits_loss_vanishes():
    ids = np.array([0, 1, 2, 1])
    logits = np.zeros((4, 3))
    logits[np.arange(3), ids[1:]] = 20.0
    seq = Sequence(ids, [False, True, True, True])
    assert ntp_loss(nx.constant(logits), SequenceBatch([seq])).item() < 1e-8


def test_ntp_loss_matches_brute_force():
    model = tiny_model(seed=6)
    batch = random_batch(model, np.random.default_rng(7), n_seqs=4)
    logits = forward(batch, model)[0]
    pos, tgt = batch.packed_targets()
    assert abs(ntp_loss(logits, batch).item() - ref_nll(logits.value, pos, tgt)) < 1e-12


def test_empty_loss_mask_is_contract_error():
    seq = Sequence([1, 2], [False, False])
    with pytest.raises(ContractError):
        ntp_loss(nx.constant(np.zeros((2, 3))), SequenceBatch([seq]))
    with pytest.raises(ContractError):
        Sequence([1, 2], [True, True])


def test_sequence_longer_than_context_rejected():
    model = tiny_model()
    with pytest.raises(LengthError):
        forward(SequenceBatch([Sequence(np.ones(40, int), np.r_[False, np.ones(39, bool)])]), model)


def test_out_of_vocab_token_rejected():
    model = tiny_model()
    with pytest.raises(ContractError):
        forward(SequenceBatch([Sequence([0, 99], [False, True])]), model)


def test_total_loss_composition():
    model = tiny_model(seed=8)
    batch = random_batch(model, np.random.default_rng(9))
    zero = compute_losses(batch, model, aux_weight=0.0)
    assert zero.total is zero.ntp
    assert combine_losses(2.0, 0.5, 1.0) == 2.5
    some = compute_losses(batch, model, aux_weight=0.3)
    assert abs(some.total.item() - (some.ntp.item() + 0.3 * aux_loss(some.report).item())) < 1e-12
    assert some.ntp.item() >= 0 and some.aux.item() >= 0
    r = some.report
    assert abs(some.aux.item() - r.num_experts * float(np.dot(r.probs.mean(0), r.fractions))) < 1e-12


def test_gradient_of_total_loss_on_random_parameters():
    model = tiny_model(seed=10)
    rng = np.random.default_rng(11)
    batch = random_batch(model, rng)
    errs = model_gradcheck(model, batch, aux_weight=0.1, rng=rng, per_tensor=1)
    chosen = rng.choice(sorted(errs), size=5, replace=False)
    assert all(errs[name] < 1e-4 for name in chosen), errs


def test_align_freezes_backbone_and_joint_unfreezes():
    model = tiny_model(seed=12)
    batch = random_batch(model, np.random.default_rng(13))
    before = {k: v.value.tobytes() for k, v in model.backbone.items()}
    adapter_before = {k: v.value.copy() for k, v in model.adapter.items()}
    opt, state = OptimizerConfig("sgd", lr=0.05), OptimizerState()
    for _ in range(10):
        train_step(batch, Stage.ALIGN, model, opt, state)
    assert {k: v.value.tobytes() for k, v in model.backbone.items()} == before
    assert any(not np.array_equal(adapter_before[k], v.value) for k, v in model.adapter.items())
    for _ in range(10):
        train_step(batch, Stage.JOINT_PRETRAIN, model, opt, state)
    assert {k: v.value.tobytes() for k, v in model.backbone.items()} != before


def test_sft_trains_everything():
    assert Stage.SFT.trainable == {"adapter", "backbone"}
    assert Stage.ALIGN.frozen == {"backbone"}


def test_single_example_overfit_mostly_decreases():
    model = tiny_model(seed=14, aux_weight=0.0)
    rng = np.random.default_rng(15)
    seq = Sequence(rng.integers(0, 10, size=5), np.ones(5, bool), frames=rng.normal(size=(3, 4)))
    batch = SequenceBatch([seq])
    opt, state = OptimizerConfig("sgd", lr=0.05), OptimizerState()
    losses = [train_step(batch, Stage.JOINT_PRETRAIN, model, opt, state, aux_weight=0.0)["l_ntp"]
              for _ in range(201)]
    decreases = sum(b < a for a, b in zip(losses[:-1], losses[1:]))
    assert decreases >= 0.9 * 200
    assert losses[-1] < losses[0]


def test_training_is_deterministic():
    def run():
        model = tiny_model(seed=16)
        rng = np.random.default_rng(17)
        opt, state = OptimizerConfig("adam", lr=0.01), OptimizerState()
        return [train_step(random_batch(model, rng), Stage.JOINT_PRETRAIN, model, opt, state)["loss"]
                for _ in range(15)]
    assert run() == run()


def test_nonfinite_loss_raises_training_error():
    model = tiny_model(seed=18)
    model.backbone["head.b"].value[0, 0] = np.inf
    with pytest.raises((TrainingError, nx.NumericError)):
        train_step(random_batch(model, np.random.default_rng(0)), Stage.JOINT_PRETRAIN, model,
                   OptimizerConfig(), OptimizerState())


def test_optimizer_config_validation():
    from moeaudio.adapter import ConfigError
    with pytest.raises(ConfigError):
        OptimizerConfig("rmsprop")
    with pytest.raises(ConfigError):
        OptimizerConfig(lr=0)


def test_checkpoint_round_trip(tmp_path):
    model = tiny_model(seed=19)
    save_params(tmp_path / "ck", model.snapshot())
    loaded = load_params(tmp_path / "ck")
    snap = model.snapshot()
    assert set(loaded) == set(snap)
    assert all(np.array_equal(loaded[k], snap[k]) for k in snap)


def test_prefetch_preserves_order_and_propagates_errors():
    assert list(prefetch(iter(range(20)), maxsize=2)) == list(range(20))

    def broken():
        yield 1
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError, match="boom"):
        list(prefetch(broken()))
