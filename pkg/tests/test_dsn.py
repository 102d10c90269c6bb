"""Loss, routing, and serialization checks for the separation model."""

import copy
import math

import numpy as np
import pytest

from dsnadapt.dsn import (
    DomainLabel,
    DsnBatch,
    DsnModel,
    adapted_model,
    cross_correlation_penalty,
    domain_posteriors,
    dsn_step,
    load_dsn_model,
    loss_diff,
    loss_domain,
    loss_recon,
    loss_senone,
    loss_total,
    reconstruct,
    save_dsn_model,
    senone_posteriors,
    split_pretrained,
    total_losses,
)
from dsnadapt.errors import ConfigError, ContractError
from dsnadapt.nn import (
    Activation,
    DenseLayer,
    Mlp,
    Rng,
    cross_entropy_loss,
    finite_diff_check,
    forward,
    init_mlp,
)

D, K, Q = 6, 5, 3


def tiny_model(seed=0, alpha=1.0, beta=0.25, gamma=0.25, with_private=True):
    shared = init_mlp([(D, 7, "sigmoid"), (7, K, "sigmoid")], Rng(seed))
    senone = init_mlp([(K, Q, "softmax")], Rng(seed + 1))
    domain = init_mlp([(K, 4, "relu"), (4, 2, "softmax")], Rng(seed + 2))
    private_src = private_tgt = recon = None
    if with_private:
        private_src = init_mlp([(D, 4, "relu"), (4, K, "sigmoid")], Rng(seed + 3))
        private_tgt = init_mlp([(D, 4, "relu"), (4, K, "sigmoid")], Rng(seed + 4))
        recon = init_mlp([(2 * K, 4, "relu"), (4, D, "linear")], Rng(seed + 5))
    return DsnModel(shared, senone, domain, private_src, private_tgt, recon,
                    alpha=alpha, beta=beta, gamma=gamma, n_h=2)


def tiny_batch(seed=10, n_s=4, n_t=5):
    rng = Rng(seed)
    return DsnBatch(
        rng.normals(n_s * D).reshape(n_s, D),
        np.array([rng.next_below(Q) for _ in range(n_s)]),
        rng.normals(n_t * D).reshape(n_t, D),
    )


def zero_head(in_dim, out_dim):
    """Softmax head with zero weights: uniform posteriors for any input."""
    return Mlp([DenseLayer(np.zeros((out_dim, in_dim)), np.zeros(out_dim), Activation.SOFTMAX)])


# ---------------------------------------------------------------------------
# split_pretrained
# ---------------------------------------------------------------------------


def seven_hidden_dnn(seed=50):
    spec = [(D, 6, "sigmoid")] + [(6, 6, "sigmoid")] * 6 + [(6, Q, "softmax")]
    return init_mlp(spec, Rng(seed))


def test_split_at_last_hidden_leaves_output_head():
    dnn = seven_hidden_dnn()
    shared, head = split_pretrained(dnn, 7)
    assert len(shared.layers) == 7
    assert len(head.layers) == 1
    assert head.layers[0].activation is Activation.SOFTMAX


def test_split_counts_at_three():
    dnn = seven_hidden_dnn()
    shared, head = split_pretrained(dnn, 3)
    assert len(shared.layers) == 3
    assert len(head.layers) == 5  # 4 hidden + output


def test_split_composition_is_bitwise_identity():
    dnn = seven_hidden_dnn(seed=51)
    x = Rng(52).normals(3 * D).reshape(3, D)
    whole, _ = forward(dnn, x)
    for n_h in (1, 3, 7):
        shared, head = split_pretrained(dnn, n_h)
        mid, _ = forward(shared, x)
        out, _ = forward(head, mid)
        assert np.array_equal(out, whole)


def test_split_rejects_bad_n_h():
    dnn = seven_hidden_dnn()
    for bad in (0, 8):
        with pytest.raises(ConfigError):
            split_pretrained(dnn, bad)


def test_split_returns_copies():
    dnn = seven_hidden_dnn()
    shared, _ = split_pretrained(dnn, 2)
    shared.layers[0].weights[0, 0] += 1.0
    assert dnn.layers[0].weights[0, 0] != shared.layers[0].weights[0, 0]


# ---------------------------------------------------------------------------
# posteriors
# ---------------------------------------------------------------------------


def test_senone_posteriors_rows_sum_to_one():
    model = tiny_model()
    x = Rng(60).normals(8 * D).reshape(8, D)
    post = senone_posteriors(model, x)
    assert post.shape == (8, Q)
    assert np.abs(post.sum(axis=1) - 1).max() < 1e-9


def test_posteriors_match_composed_forward():
    model = tiny_model(seed=61)
    x = Rng(62).normals(4 * D).reshape(4, D)
    mid, _ = forward(model.shared, x)
    want, _ = forward(model.senone, mid)
    assert np.array_equal(senone_posteriors(model, x), want)
    want_d, _ = forward(model.domain, mid)
    assert np.array_equal(domain_posteriors(model, x), want_d)


def test_domain_posteriors_well_behaved():
    model = tiny_model(seed=63)
    post = domain_posteriors(model, Rng(64).normals(5 * D).reshape(5, D))
    assert post.shape == (5, 2)
    assert np.isfinite(post).all()
    assert ((post > 0) & (post < 1)).all()


def test_identical_rows_identical_posteriors():
    model = tiny_model(seed=65)
    row = Rng(66).normals(D)
    post = senone_posteriors(model, np.vstack([row, row]))
    assert np.array_equal(post[0], post[1])


# ---------------------------------------------------------------------------
# loss_senone
# ---------------------------------------------------------------------------


def test_loss_senone_uniform_model():
    model = tiny_model()
    model.senone.layers[0].weights[...] = 0.0
    x = Rng(70).normals(6 * D).reshape(6, D)
    y = np.array([0, 1, 2, 0, 1, 2])
    loss, _ = loss_senone(model, x, y)
    assert abs(loss - math.log(Q)) < 1e-12


def test_loss_senone_perfect_model_is_zero():
    # identity shared net, huge-margin softmax head: posterior exactly one-hot
    shared = Mlp([DenseLayer(np.eye(Q), np.zeros(Q), Activation.LINEAR)])
    senone = Mlp([DenseLayer(1e4 * np.eye(Q), np.zeros(Q), Activation.SOFTMAX)])
    domain = init_mlp([(Q, 4, "relu"), (4, 2, "softmax")], Rng(0))
    model = DsnModel(shared, senone, domain, None, None, None, 1.0, 0.0, 0.0, n_h=1)
    x = np.eye(Q)
    loss, _ = loss_senone(model, x, np.arange(Q))
    assert loss == 0.0


def test_loss_senone_matches_ce_on_composed_forward():
    model = tiny_model(seed=71)
    batch = tiny_batch(seed=72)
    mid, _ = forward(model.shared, batch.source_x)
    post, _ = forward(model.senone, mid)
    want, _ = cross_entropy_loss(post, batch.source_y)
    got, _ = loss_senone(model, batch.source_x, batch.source_y)
    assert got == want


# ---------------------------------------------------------------------------
# loss_domain
# ---------------------------------------------------------------------------


def test_loss_domain_uniform_classifier():
    model = tiny_model(seed=73)
    model.domain = zero_head(K, 2)
    batch = tiny_batch(seed=74)
    loss, ctx = loss_domain(model, batch.source_x, batch.target_x)
    assert abs(loss - math.log(2)) < 1e-12
    assert ctx.accuracy in (0.0, 1.0) or 0 <= ctx.accuracy <= 1


def test_loss_domain_matches_ce_oracle_and_is_symmetric():
    model = tiny_model(seed=75)
    batch = tiny_batch(seed=76)
    f_s, _ = forward(model.shared, batch.source_x)
    f_t, _ = forward(model.shared, batch.target_x)
    post_s, _ = forward(model.domain, f_s)
    post_t, _ = forward(model.domain, f_t)
    n_s, n_t = len(f_s), len(f_t)
    # direct arithmetic: source rows use column 0, target rows column 1
    want = -(np.log(post_s[:, 0]).sum() + np.log(post_t[:, 1]).sum()) / (n_s + n_t)
    got, _ = loss_domain(model, batch.source_x, batch.target_x)
    assert abs(got - want) < 1e-12
    # same multiset of rows in swapped order: same mean
    swapped = -(np.log(post_t[:, 1]).sum() + np.log(post_s[:, 0]).sum()) / (n_s + n_t)
    assert abs(got - swapped) < 1e-12


def test_loss_domain_rejects_empty_batches():
    model = tiny_model()
    x = np.zeros((2, D))
    with pytest.raises(ContractError):
        loss_domain(model, x, np.zeros((0, D)))
    with pytest.raises(ContractError):
        loss_domain(model, np.zeros((0, D)), x)


def test_reversed_gradient_pushes_domain_loss_up():
    # train the domain head alone until it separates well, then check that
    # the reversal-routed update on the shared net increases the loss
    model = tiny_model(seed=77, alpha=1.0)
    batch = tiny_batch(seed=78, n_s=16, n_t=16)
    from dsnadapt.nn import sgd_update

    for _ in range(300):
        _, ctx = loss_domain(model, batch.source_x, batch.target_x)
        sgd_update(model.domain, ctx.domain, 0.5)
    before, ctx = loss_domain(model, batch.source_x, batch.target_x)
    sgd_update(model.shared, ctx.shared_reversed, 1e-2)
    after, _ = loss_domain(model, batch.source_x, batch.target_x)
    assert after > before


# ---------------------------------------------------------------------------
# difference loss
# ---------------------------------------------------------------------------


def test_penalty_single_sample_outer_product():
    term, _, _ = cross_correlation_penalty(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert term == 1.0


def test_penalty_single_sample_norm_identity():
    rng = Rng(80)
    f_c = rng.normals(4).reshape(1, 4)
    f_p = rng.normals(4).reshape(1, 4)
    term, _, _ = cross_correlation_penalty(f_c, f_p)
    want = float((f_c**2).sum() * (f_p**2).sum())
    assert abs(term - want) < 1e-12


def test_penalty_two_sample_cancellation():
    f_c = np.array([[1.0, 0.0], [1.0, 0.0]])
    f_p = np.array([[0.0, 1.0], [0.0, -1.0]])
    term, _, _ = cross_correlation_penalty(f_c, f_p)
    assert term == 0.0


def test_penalty_matches_brute_force():
    rng = Rng(81)
    b, k, p = 5, 3, 4
    f_c = rng.normals(b * k).reshape(b, k)
    f_p = rng.normals(b * p).reshape(b, p)
    term, _, _ = cross_correlation_penalty(f_c, f_p)
    acc = np.zeros((k, p))
    for i in range(b):
        acc += np.outer(f_c[i], f_p[i])
    acc /= b
    want = float((acc**2).sum())
    assert abs(term - want) < 1e-12


def test_loss_diff_composes_extractors():
    model = tiny_model(seed=82)
    batch = tiny_batch(seed=83)
    f_sc, _ = forward(model.shared, batch.source_x)
    f_tc, _ = forward(model.shared, batch.target_x)
    f_sp, _ = forward(model.private_src, batch.source_x)
    f_tp, _ = forward(model.private_tgt, batch.target_x)
    want = cross_correlation_penalty(f_sc, f_sp)[0] + cross_correlation_penalty(f_tc, f_tp)[0]
    got, _ = loss_diff(model, batch.source_x, batch.target_x)
    assert abs(got - want) < 1e-12


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------


def test_reconstruct_shapes_and_domain_selection():
    model = tiny_model(seed=84)
    x = Rng(85).normals(3 * D).reshape(3, D)
    out_s = reconstruct(model, x, DomainLabel.SOURCE)
    out_t = reconstruct(model, x, DomainLabel.TARGET)
    assert out_s.shape == (3, D)
    assert not np.array_equal(out_s, out_t)  # private nets differ
    model.private_tgt = copy.deepcopy(model.private_src)
    assert np.array_equal(
        reconstruct(model, x, DomainLabel.SOURCE), reconstruct(model, x, DomainLabel.TARGET)
    )


def test_reconstruct_matches_explicit_concatenation():
    model = tiny_model(seed=86)
    x = Rng(87).normals(2 * D).reshape(2, D)
    f_c, _ = forward(model.shared, x)
    f_p, _ = forward(model.private_src, x)
    want, _ = forward(model.recon, np.hstack([f_c, f_p]))
    assert np.array_equal(reconstruct(model, x, DomainLabel.SOURCE), want)


def test_loss_recon_perfect_reconstructor():
    # identity shared net and a reconstructor that copies the shared half
    shared = Mlp([DenseLayer(np.eye(D), np.zeros(D), Activation.LINEAR)])
    senone = zero_head(D, Q)
    domain = init_mlp([(D, 4, "relu"), (4, 2, "softmax")], Rng(0))
    private_src = init_mlp([(D, 4, "relu"), (4, D, "sigmoid")], Rng(1))
    private_tgt = init_mlp([(D, 4, "relu"), (4, D, "sigmoid")], Rng(2))
    recon = Mlp([DenseLayer(np.hstack([np.eye(D), np.zeros((D, D))]), np.zeros(D), Activation.LINEAR)])
    model = DsnModel(shared, senone, domain, private_src, private_tgt, recon, 1.0, 0.25, 0.25, n_h=1)
    x_s = Rng(3).normals(4 * D).reshape(4, D)
    x_t = Rng(4).normals(3 * D).reshape(3, D)
    loss, _ = loss_recon(model, x_s, x_t)
    assert loss == 0.0


def test_loss_recon_zero_output_reconstructor():
    model = tiny_model(seed=88)
    for layer in model.recon.layers:
        layer.weights[...] = 0.0
        layer.bias[...] = 0.0
    batch = tiny_batch(seed=89)
    loss, _ = loss_recon(model, batch.source_x, batch.target_x)
    want = float((batch.source_x**2).sum(axis=1).mean() + (batch.target_x**2).sum(axis=1).mean())
    assert abs(loss - want) < 1e-12


def test_loss_recon_matches_mse_oracle():
    model = tiny_model(seed=90)
    batch = tiny_batch(seed=91)
    out_s = reconstruct(model, batch.source_x, DomainLabel.SOURCE)
    out_t = reconstruct(model, batch.target_x, DomainLabel.TARGET)
    want = float(((out_s - batch.source_x) ** 2).sum(axis=1).mean()) + float(
        ((out_t - batch.target_x) ** 2).sum(axis=1).mean()
    )
    got, _ = loss_recon(model, batch.source_x, batch.target_x)
    assert abs(got - want) < 1e-12


# ---------------------------------------------------------------------------
# total loss and the joint step
# ---------------------------------------------------------------------------


def test_total_equals_sum_of_terms():
    model = tiny_model(seed=92)
    batch = tiny_batch(seed=93)
    l_sen, _ = loss_senone(model, batch.source_x, batch.source_y)
    l_dom, _ = loss_domain(model, batch.source_x, batch.target_x)
    l_diff, _ = loss_diff(model, batch.source_x, batch.target_x)
    l_rec, _ = loss_recon(model, batch.source_x, batch.target_x)
    trace = total_losses(model, batch)
    want = l_sen + l_dom + model.beta * l_diff + model.gamma * l_rec
    assert abs(trace.loss_total - want) < 1e-12
    trace2, _ = loss_total(model, batch)
    assert abs(trace2.loss_total - want) < 1e-12


def test_total_scalar_invariant_to_alpha():
    batch = tiny_batch(seed=94)
    values = []
    for alpha in (0.0, 1.0, 8.0):
        trace = total_losses(tiny_model(seed=95, alpha=alpha), batch)
        values.append(trace.loss_total)
    assert values[0] == values[1] == values[2]


def test_total_with_zero_coefficients():
    model = tiny_model(seed=96, beta=0.0, gamma=0.0)
    batch = tiny_batch(seed=97)
    trace = total_losses(model, batch)
    assert trace.loss_total == trace.loss_senone + trace.loss_domain


def test_alpha_zero_keeps_domain_out_of_shared_grads():
    batch = tiny_batch(seed=98)
    m_zero = tiny_model(seed=99, alpha=0.0, beta=0.0, gamma=0.0)
    _, grads = loss_total(m_zero, batch)
    l, sen = loss_senone(m_zero, batch.source_x, batch.source_y)
    for a, b in zip(grads.shared.weights, sen.shared.weights):
        assert np.array_equal(a, b)


ROUTED_GROUPS = ["shared", "senone", "domain", "private_src", "private_tgt", "recon"]


def routed_objective(model, batch, group):
    t = total_losses(model, batch)
    if group == "shared":
        return (
            t.loss_senone
            - model.alpha * t.loss_domain
            + model.beta * t.loss_diff
            + model.gamma * t.loss_recon
        )
    if group == "senone":
        return t.loss_senone
    if group == "domain":
        return t.loss_domain
    if group in ("private_src", "private_tgt"):
        return model.beta * t.loss_diff + model.gamma * t.loss_recon
    return t.loss_recon


@pytest.mark.parametrize("group", ROUTED_GROUPS)
def test_routed_gradients_match_finite_differences(group):
    model = tiny_model(seed=5, alpha=1.5, beta=0.4, gamma=0.3)
    batch = tiny_batch(seed=6, n_s=6, n_t=7)
    _, grads = loss_total(model, batch)
    net = getattr(model, group)
    analytic = getattr(grads, group)
    report = finite_diff_check(lambda _: routed_objective(model, batch, group), net, analytic, h=1e-6)
    assert report.max_rel_error < 1e-3, f"{group}: {report.max_rel_error}"


def test_step_applies_minus_mu_times_gradient():
    model = tiny_model(seed=7)
    batch = tiny_batch(seed=8)
    before = copy.deepcopy(model)
    _, grads = loss_total(copy.deepcopy(model), batch)
    mu = 0.05
    dsn_step(model, batch, mu)
    for name in ROUTED_GROUPS:
        g = getattr(grads, name)
        if g is None:
            continue
        for la, lb, gw in zip(getattr(model, name).layers, getattr(before, name).layers, g.weights):
            assert np.array_equal(la.weights, lb.weights - mu * gw)


def test_step_with_zero_mu_changes_nothing():
    model = tiny_model(seed=9)
    batch = tiny_batch(seed=10)
    before = copy.deepcopy(model)
    _, t1 = dsn_step(model, batch, 0.0)
    _, t2 = dsn_step(model, batch, 0.0)
    assert t1 == t2
    for name in ROUTED_GROUPS:
        for la, lb in zip(getattr(model, name).layers, getattr(before, name).layers):
            assert np.array_equal(la.weights, lb.weights)
            assert np.array_equal(la.bias, lb.bias)


def test_senone_only_step_descends():
    model = tiny_model(seed=11, alpha=0.0, beta=0.0, gamma=0.0)
    batch = tiny_batch(seed=12, n_s=8, n_t=8)
    before, _ = loss_senone(model, batch.source_x, batch.source_y)
    dsn_step(model, batch, 1e-3)
    after, _ = loss_senone(model, batch.source_x, batch.source_y)
    assert after < before


def test_baseline_equivalence_bitwise():
    # same shared/senone/domain weights, beta = gamma = 0: the private nets
    # must not disturb a single bit of the common sub-network updates
    batch = tiny_batch(seed=13, n_s=8, n_t=8)
    grl = tiny_model(seed=14, alpha=2.0, beta=0.0, gamma=0.0, with_private=False)
    full = tiny_model(seed=14, alpha=2.0, beta=0.0, gamma=0.0, with_private=True)
    for _ in range(5):
        dsn_step(grl, batch, 0.1)
        dsn_step(full, batch, 0.1)
    for name in ("shared", "senone", "domain"):
        for la, lb in zip(getattr(grl, name).layers, getattr(full, name).layers):
            assert np.array_equal(la.weights, lb.weights)
            assert np.array_equal(la.bias, lb.bias)


def test_trace_fields_are_finite_and_nonnegative():
    model = tiny_model(seed=15)
    batch = tiny_batch(seed=16)
    _, trace = dsn_step(model, batch, 0.01)
    for v in (trace.loss_senone, trace.loss_domain, trace.loss_diff, trace.loss_recon):
        assert v >= 0 and np.isfinite(v)
    assert np.isfinite(trace.loss_total)
    assert 0 <= trace.domain_accuracy <= 1


def test_domain_label_convention():
    assert DomainLabel.SOURCE.column == 0
    assert DomainLabel.TARGET.column == 1


# ---------------------------------------------------------------------------
# adapted model and serialization
# ---------------------------------------------------------------------------


def test_adapted_model_composition():
    model = tiny_model(seed=17)
    shared, head = adapted_model(model)
    x = Rng(18).normals(3 * D).reshape(3, D)
    mid, _ = forward(shared, x)
    out, _ = forward(head, mid)
    assert out.shape == (3, Q)


def test_adapted_model_before_training_equals_source_dnn():
    dnn = seven_hidden_dnn(seed=19)
    shared, head = split_pretrained(dnn, 4)
    x = Rng(20).normals(4 * D).reshape(4, D)
    mid, _ = forward(shared, x)
    out, _ = forward(head, mid)
    want, _ = forward(dnn, x)
    assert np.array_equal(out, want)


@pytest.mark.parametrize("with_private", [True, False])
def test_dsn_model_roundtrip_bitwise(tmp_path, with_private):
    model = tiny_model(seed=21, alpha=3.0, beta=0.1, gamma=0.7, with_private=with_private)
    path = tmp_path / "model.dsn"
    save_dsn_model(model, path)
    loaded = load_dsn_model(path)
    assert (loaded.alpha, loaded.beta, loaded.gamma, loaded.n_h) == (3.0, 0.1 if with_private else 0.1, 0.7, 2)
    for name in ROUTED_GROUPS:
        a, b = getattr(model, name), getattr(loaded, name)
        if a is None:
            assert b is None
            continue
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.weights, lb.weights)
            assert np.array_equal(la.bias, lb.bias)
            assert la.activation == lb.activation


def test_roundtrip_preserves_predictions(tmp_path):
    model = tiny_model(seed=22)
    path = tmp_path / "model.dsn"
    save_dsn_model(model, path)
    loaded = load_dsn_model(path)
    x = Rng(23).normals(5 * D).reshape(5, D)
    assert np.array_equal(senone_posteriors(model, x), senone_posteriors(loaded, x))
