import numpy as np
import pytest

from semlab import tensor as T
from semlab.errors import ConfigurationError, DegenerateInputError, LengthError
from semlab.gradcheck import grad_check
from semlab.pathstar import GraphSample, Vocabulary
from semlab.semformer import (
    PlannedBatch,
    SemformerConfig,
    SemformerModules,
    build_planned_batch,
    build_planned_sequence,
    encode_response_latents,
    lm_loss_from_batch,
    predict_latents,
    reconstruct_response,
    reconstruction_accuracy,
    semformer_loss,
    semformer_parameter_count,
)
from semlab.transformer import ModelConfig, TransformerLM, parameter_count

VOCAB = Vocabulary(value_range_n=10, n_plan_tokens=4)
CONFIG = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=VOCAB.size,
                     max_seq_len=48, dtype="float64")
SEM = SemformerConfig(k=4, latent_dim=8, alpha=1.0, dec_layers=1)


def _lm(seed=0, config=CONFIG):
    return TransformerLM(config, np.random.default_rng(seed))


def _modules(seed=1, sem=SEM, config=CONFIG):
    return SemformerModules(config, sem, dec_max_seq_len=16, rng=np.random.default_rng(seed))


def _samples(n=3, prefix_len=6, ans_len=5, seed=2):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        prefix = rng.integers(0, 10, size=prefix_len).tolist()
        answer = rng.integers(0, 10, size=ans_len - 1).tolist() + [VOCAB.eos]
        out.append(GraphSample(prefix, answer, 2, 5, 10))
    return out


# -- planned sequences ---------------------------------------------------------


def test_planned_sequence_arithmetic():
    seq = build_planned_sequence([1, 2, 3], [4, 5], k=4, vocab=VOCAB)
    assert len(seq.tokens) == 9
    assert seq.n == 3
    # exactly k masked target positions (entry 0 is not a target)
    assert int((~seq.lm_loss_mask[1:]).sum()) == 4
    np.testing.assert_array_equal(seq.plan_positions, [3, 4, 5, 6])
    assert list(seq.tokens[3:7]) == VOCAB.plan_ids
    # the token after the last planning token is the first answer token
    assert seq.tokens[7] == 4


def test_planned_sequence_k0_degenerates_to_standard():
    seq = build_planned_sequence([1, 2, 3], [4, 5], k=0, vocab=VOCAB)
    assert list(seq.tokens) == [1, 2, 3, 4, 5]
    assert len(seq.plan_positions) == 0
    assert seq.lm_loss_mask.tolist() == [False, True, True, True, True]


def test_planned_sequence_mask_false_exactly_at_plan_targets():
    seq = build_planned_sequence([7, 8], [9, 1, 2], k=3, vocab=Vocabulary(10, 3))
    for t in range(1, len(seq.tokens)):
        expected = seq.tokens[t] not in Vocabulary(10, 3).plan_ids
        assert seq.lm_loss_mask[t] == expected


def test_planned_sequence_plan_positions_follow_prefix():
    # G(2,5)-style serialization: positions n..n+k-1, n = prefix length
    prefix = list(range(8))
    seq = build_planned_sequence(prefix, [1, 2, 3, 4, 5, VOCAB.eos], k=4, vocab=VOCAB)
    np.testing.assert_array_equal(seq.plan_positions, np.arange(8, 12))


def test_planned_sequence_length_error():
    with pytest.raises(LengthError):
        build_planned_sequence(list(range(8)), [1, 2], k=4, vocab=VOCAB, max_seq_len=10)


def test_planned_sequence_empty_inputs():
    with pytest.raises(DegenerateInputError):
        build_planned_sequence([], [1], k=4, vocab=VOCAB)
    with pytest.raises(DegenerateInputError):
        build_planned_sequence([1], [], k=4, vocab=VOCAB)


def test_batch_answer_only_mask_restricts_prefix():
    samples = _samples()
    batch = build_planned_batch(samples, VOCAB, k=4, train_prefix=False)
    n, k = batch.n, 4
    assert not batch.train_mask[:, :n + k].any()
    assert batch.train_mask[:, n + k:].all()
    full = build_planned_batch(samples, VOCAB, k=4, train_prefix=True)
    assert full.train_mask[:, 1:n].all()


# -- encoder / latents -----------------------------------------------------------


def test_encode_latents_shape_any_answer_length():
    lm = _lm()
    modules = _modules()
    for t_ans in (1, 3, 7):
        answers = np.random.default_rng(3).integers(0, 10, size=(2, t_ans))
        z = encode_response_latents(answers, lm, modules)
        assert z.shape == (2, SEM.k, SEM.latent_dim)


def test_encode_latents_single_token_is_state_projection():
    lm = _lm()
    modules = _modules()
    answers = np.array([[5]])
    h = lm.forward(answers).hidden  # [1, 1, d]
    z = encode_response_latents(answers, lm, modules)
    want = h.data[0, 0] @ modules.down_w.data + modules.down_b.data
    for row in range(SEM.k):
        np.testing.assert_allclose(z.data[0, row], want, atol=1e-12)


def test_encode_latents_empty_answer_raises():
    with pytest.raises(DegenerateInputError):
        encode_response_latents(np.zeros((1, 0), dtype=np.int64), _lm(), _modules())


def test_stop_grad_encoder_blocks_lm_gradients():
    config = SemformerConfig(k=2, latent_dim=4, dec_layers=1, stop_grad_encoder=True)
    lm = _lm(4)
    modules = SemformerModules(CONFIG, config, 16, np.random.default_rng(5))
    answers = np.random.default_rng(6).integers(0, 10, size=(2, 4))
    z = encode_response_latents(answers, lm, modules)
    loss, _ = reconstruct_response(z, answers, modules)
    loss.backward()
    assert all(p.grad is None for p in lm.parameters())
    assert modules.latent_query.grad is not None
    assert modules.down_w.grad is not None


def test_predictor_is_shared_across_positions():
    modules = _modules()
    rng = np.random.default_rng(7)
    h = rng.normal(size=(1, 9, CONFIG.d_model))
    h[0, 4] = h[0, 2]  # identical hidden states at two plan positions
    pred = predict_latents(T.Tensor(h), np.array([2, 4, 6, 7]), modules)
    assert pred.shape == (1, 4, SEM.latent_dim)
    np.testing.assert_array_equal(pred.data[0, 0], pred.data[0, 1])


def test_predictor_matches_per_row_oracle():
    modules = _modules()
    rng = np.random.default_rng(8)
    h = rng.normal(size=(2, 6, CONFIG.d_model))
    pred = predict_latents(T.Tensor(h), np.array([1, 3]), modules)
    for b in range(2):
        for i, pos in enumerate((1, 3)):
            want = modules.pred_w.data.T @ h[b, pos] + modules.pred_b.data
            np.testing.assert_allclose(pred.data[b, i], want, atol=1e-12)


# -- reconstruction ---------------------------------------------------------------


def test_up_projections_are_distinct_parameters():
    modules = _modules()
    names = {p.name for p in modules.parameters()}
    for i in range(SEM.k):
        assert f"plan.up{i}.w" in names
    # permuting which up-projection serves which latent changes the loss
    lm = _lm(9)
    answers = np.random.default_rng(10).integers(0, 10, size=(2, 4))
    z = encode_response_latents(answers, lm, modules).detach()
    base, _ = reconstruct_response(z, answers, modules)
    modules.up_w[0], modules.up_w[1] = modules.up_w[1], modules.up_w[0]
    permuted, _ = reconstruct_response(z, answers, modules)
    modules.up_w[0], modules.up_w[1] = modules.up_w[1], modules.up_w[0]
    assert base.item() != permuted.item()


def test_semformer_parameter_count_closed_form():
    modules = _modules()
    d, dz, k = CONFIG.d_model, SEM.latent_dim, SEM.k
    want = (k * d + (d * dz + dz) + k * (dz * d + d) + (d * dz + dz)
            + parameter_count(ModelConfig(n_layers=SEM.dec_layers, n_heads=CONFIG.n_heads,
                                          d_model=d, d_ff=CONFIG.d_ff, vocab_size=CONFIG.vocab_size,
                                          max_seq_len=16, dtype="float64")))
    actual = sum(p.size for p in modules.parameters())
    assert actual == want == semformer_parameter_count(CONFIG, SEM, 16)


# -- joint loss ---------------------------------------------------------------------


def _batch(samples=None):
    return build_planned_batch(samples or _samples(), VOCAB, k=4)


def test_total_is_exact_sum():
    lm = _lm(11)
    modules = _modules(12)
    losses = semformer_loss(_batch(), lm, modules)
    assert losses.total.item() == losses.lm.item() + losses.ae.item() + SEM.alpha * losses.rp.item()


def test_alpha_zero_total_is_lm_plus_ae():
    sem = SemformerConfig(k=4, latent_dim=8, alpha=0.0, dec_layers=1)
    lm = _lm(13)
    modules = _modules(14, sem=sem)
    losses = semformer_loss(_batch(), lm, modules)
    assert losses.total.item() == losses.lm.item() + losses.ae.item()


def test_rp_zero_when_prediction_equals_target():
    lm = _lm(15)
    modules = _modules(16)
    batch = _batch()
    z = encode_response_latents(batch.answers, lm, modules)
    diff = z - z
    assert (diff * diff).sum().item() == 0.0


def test_eq2_mask_bit_invariance_on_lm_term():
    # replacing the *target* token at any masked position leaves lm bit-identical
    lm = _lm(17)
    batch = build_planned_batch(_samples(), VOCAB, k=4, train_prefix=True)
    hidden = lm.forward(batch.tokens).hidden
    b, length = batch.tokens.shape
    logits = lm.logits_from_hidden(hidden[:, :length - 1])
    v = logits.shape[-1]
    flat_logits = logits.reshape(b * (length - 1), v)
    mask = batch.train_mask[:, 1:].reshape(-1)
    targets = batch.tokens[:, 1:].reshape(-1).copy()
    base = T.cross_entropy_masked(flat_logits, targets, mask).item()
    tampered = targets.copy()
    tampered[~mask] = (tampered[~mask] + 5) % VOCAB.size
    again = T.cross_entropy_masked(flat_logits, tampered, mask).item()
    assert base == again


def test_semformer_loss_gradcheck():
    config = ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=16, vocab_size=VOCAB.size,
                         max_seq_len=32, dtype="float64")
    sem = SemformerConfig(k=2, latent_dim=4, dec_layers=1)
    vocab = Vocabulary(10, 2)
    lm = TransformerLM(config, np.random.default_rng(18))
    modules = SemformerModules(config, sem, 12, np.random.default_rng(19))
    samples = _samples(n=2, prefix_len=4, ans_len=4, seed=20)
    batch = build_planned_batch(samples, vocab, k=2)
    params = lm.parameters() + modules.parameters()

    def f():
        return semformer_loss(batch, lm, modules).total

    err = grad_check(f, params, n_coords=2, rng=np.random.default_rng(21))
    assert err < 1e-4


def test_autoencoder_overfits_fixed_answers():
    # bottleneck capacity check at miniature scale
    config = ModelConfig(n_layers=1, n_heads=2, d_model=32, d_ff=64, vocab_size=VOCAB.size,
                         max_seq_len=32, dtype="float64")
    sem = SemformerConfig(k=2, latent_dim=8, dec_layers=1)
    lm = TransformerLM(config, np.random.default_rng(22))
    modules = SemformerModules(config, sem, 12, np.random.default_rng(23))
    rng = np.random.default_rng(24)
    answers = rng.integers(0, 10, size=(16, 4))
    from semlab.optim import AdamW

    params = lm.parameters() + modules.parameters()
    opt = AdamW(params, lr=3e-3, weight_decay=0.0)
    for _ in range(150):
        opt.zero_grad()
        z = encode_response_latents(answers, lm, modules)
        loss, _ = reconstruct_response(z, answers, modules)
        loss.backward()
        opt.step()
    assert reconstruction_accuracy(lm, modules, answers) >= 0.999


def test_latent_dim_must_be_below_d_model():
    with pytest.raises(ConfigurationError):
        SemformerModules(CONFIG, SemformerConfig(k=2, latent_dim=CONFIG.d_model),
                         16, np.random.default_rng(0))
