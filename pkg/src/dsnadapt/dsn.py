"""Domain separation model: six sub-networks, five loss terms, joint SGD.

The model splits a pretrained frame classifier into a shared extractor and a
class head, then trains it jointly with a domain discriminator (adversarial,
through the reversal layer), per-domain private extractors (decorrelated from
the shared component), and a reconstructor over the concatenated components.

Update routing for one step with learning rate mu:

    shared      <- d(senone) - alpha * d(domain) + beta * d(diff) + gamma * d(recon)
    senone head <- d(senone)
    domain clf  <- d(domain)
    private_*   <- beta * d(diff) + gamma * d(recon)
    recon       <- d(recon)

The total-loss scalar reported in traces is senone + domain + beta*diff +
gamma*recon; alpha only flips and scales gradients, never the scalar.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, ShapeError, TrainingDivergedError
from .grl import GrlConfig, grl_backward, grl_forward
from .nn import (
    Activation,
    Gradients,
    LineCursor,
    Matrix,
    Mlp,
    backward,
    cross_entropy_loss,
    forward,
    mlp_from_cursor,
    mlp_to_lines,
    mse_loss,
    sgd_update,
)


class DomainLabel(Enum):
    SOURCE = 1
    TARGET = 2

    @property
    def column(self) -> int:
        """Softmax column of this domain: source -> 0, target -> 1."""
        return self.value - 1


@dataclass
class DsnModel:
    """The six sub-networks plus loss coefficients.

    private_src, private_tgt and recon may be None, which is the
    reversal-only baseline topology (no difference or reconstruction terms).
    """

    shared: Mlp
    senone: Mlp
    domain: Mlp
    private_src: Mlp | None
    private_tgt: Mlp | None
    recon: Mlp | None
    alpha: float
    beta: float
    gamma: float
    n_h: int

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        k = self.shared.out_dim
        if self.senone.in_dim != k or self.domain.in_dim != k:
            raise ConfigError("senone/domain heads must consume the shared dim")
        if self.senone.layers[-1].activation is not Activation.SOFTMAX:
            raise ConfigError("senone head must end in softmax")
        if self.domain.out_dim != 2 or self.domain.layers[-1].activation is not Activation.SOFTMAX:
            raise ConfigError("domain classifier must be a 2-way softmax")
        privates = (self.private_src, self.private_tgt, self.recon)
        if any(p is None for p in privates) != all(p is None for p in privates):
            raise ConfigError("private extractors and reconstructor must be present together")
        if self.private_src is not None:
            for p in (self.private_src, self.private_tgt):
                if p.out_dim != k or p.layers[-1].activation is not Activation.SIGMOID:
                    raise ConfigError("private extractors must end in sigmoid of the shared dim")
                if p.in_dim != self.shared.in_dim:
                    raise ConfigError("private extractors must consume the input features")
            if self.recon.in_dim != 2 * k:
                raise ConfigError("reconstructor input must be the concatenated components (2K)")
            if self.recon.out_dim != self.shared.in_dim:
                raise ConfigError("reconstructor must emit the input feature dim")
            if self.recon.layers[-1].activation is not Activation.LINEAR:
                raise ConfigError("reconstructor output must be linear")

    @property
    def shared_dim(self) -> int:
        return self.shared.out_dim

    @property
    def num_classes(self) -> int:
        return self.senone.out_dim

    @property
    def feature_dim(self) -> int:
        return self.shared.in_dim

    @property
    def has_private(self) -> bool:
        return self.private_src is not None


@dataclass
class DsnBatch:
    """Equal-footing minibatch: labeled source frames plus unlabeled target
    frames of the same feature dim."""

    source_x: Matrix
    source_y: np.ndarray
    target_x: Matrix

    def __post_init__(self):
        self.source_y = np.asarray(self.source_y, dtype=np.int64)
        if self.source_x.ndim != 2 or self.target_x.ndim != 2:
            raise ShapeError("batch features must be 2-D")
        if self.source_x.shape[0] == 0 or self.target_x.shape[0] == 0:
            raise ContractError("both domains must contribute frames")
        if self.source_x.shape[1] != self.target_x.shape[1]:
            raise ShapeError("source and target feature dims differ")
        if self.source_y.shape != (self.source_x.shape[0],):
            raise ShapeError("source labels do not match source rows")


@dataclass
class StepTrace:
    loss_senone: float
    loss_domain: float
    loss_diff: float
    loss_recon: float
    loss_total: float
    domain_accuracy: float


@dataclass
class SenoneGrads:
    shared: Gradients
    senone: Gradients


@dataclass
class DomainGrads:
    domain: Gradients
    shared_reversed: Gradients  # already scaled by -alpha via the reversal layer
    accuracy: float


@dataclass
class DiffGrads:
    shared: Gradients
    private_src: Gradients
    private_tgt: Gradients


@dataclass
class ReconGrads:
    shared: Gradients
    private_src: Gradients
    private_tgt: Gradients
    recon: Gradients


@dataclass
class DsnGrads:
    """Routed per-sub-network gradients for one joint step. None means the
    sub-network receives no update this step."""

    shared: Gradients
    senone: Gradients
    domain: Gradients
    private_src: Gradients | None
    private_tgt: Gradients | None
    recon: Gradients | None


def split_pretrained(source_dnn: Mlp, n_h: int) -> tuple[Mlp, Mlp]:
    """Split a pretrained classifier after its n_h-th hidden layer.

    Returns deep copies (shared extractor, class head); composing them
    reproduces the original forward pass bitwise.
    """
    n_hidden = len(source_dnn.layers) - 1
    if not 1 <= n_h <= n_hidden:
        raise ConfigError(f"n_h must be in [1, {n_hidden}], got {n_h}")
    shared = Mlp([layer.copy() for layer in source_dnn.layers[:n_h]])
    head = Mlp([layer.copy() for layer in source_dnn.layers[n_h:]])
    return shared, head


def senone_posteriors(model: DsnModel, x: Matrix) -> Matrix:
    shared, _ = forward(model.shared, x)
    post, _ = forward(model.senone, shared)
    return post


def domain_posteriors(model: DsnModel, x: Matrix) -> Matrix:
    shared, _ = forward(model.shared, x)
    post, _ = forward(model.domain, grl_forward(shared))
    return post


def loss_senone(model: DsnModel, source_x: Matrix, source_y: np.ndarray) -> tuple[float, SenoneGrads]:
    f_c, cache_c = forward(model.shared, source_x)
    post, cache_y = forward(model.senone, f_c)
    loss, g_logits = cross_entropy_loss(post, source_y)
    g_head, g_fc = backward(model.senone, cache_y, g_logits, at_logits=True)
    g_shared, _ = backward(model.shared, cache_c, g_fc)
    return loss, SenoneGrads(g_shared, g_head)


def _domain_targets(n_source: int, n_target: int) -> np.ndarray:
    labels = np.empty(n_source + n_target, dtype=np.int64)
    labels[:n_source] = DomainLabel.SOURCE.column
    labels[n_source:] = DomainLabel.TARGET.column
    return labels


def loss_domain(model: DsnModel, source_x: Matrix, target_x: Matrix) -> tuple[float, DomainGrads]:
    """Mean domain cross-entropy over both batches.

    One scalar, two gradient destinations: the classifier itself descends on
    it, while the shared extractor receives the reversal-layer gradient
    (-alpha times the plain one) and therefore ascends.
    """
    if source_x.shape[0] == 0 or target_x.shape[0] == 0:
        raise ContractError("loss_domain needs frames from both domains")
    n_s = source_x.shape[0]
    f_s, cache_s = forward(model.shared, source_x)
    f_t, cache_t = forward(model.shared, target_x)
    stacked = grl_forward(np.vstack([f_s, f_t]))
    post, cache_d = forward(model.domain, stacked)
    labels = _domain_targets(n_s, target_x.shape[0])
    loss, g_logits = cross_entropy_loss(post, labels)
    accuracy = float((post.argmax(axis=1) == labels).mean())
    g_domain, g_in = backward(model.domain, cache_d, g_logits, at_logits=True)
    cfg = GrlConfig(model.alpha)
    g_shared, _ = backward(model.shared, cache_s, grl_backward(g_in[:n_s], cfg))
    g_shared_t, _ = backward(model.shared, cache_t, grl_backward(g_in[n_s:], cfg))
    g_shared.add_scaled(g_shared_t)
    return loss, DomainGrads(g_domain, g_shared, accuracy)


def cross_correlation_penalty(
    shared_f: Matrix, private_f: Matrix
) -> tuple[float, Matrix, Matrix]:
    """Squared Frobenius norm of the batch-mean outer product of the two
    component matrices; also returns its gradients w.r.t. each input.

    For a single row this equals |shared|^2 * |private|^2.
    """
    if shared_f.shape[0] != private_f.shape[0]:
        raise ShapeError("component batches must have equal row counts")
    b = shared_f.shape[0]
    if b == 0:
        raise ContractError("empty component batch")
    c = shared_f.T @ private_f / b
    term = float((c * c).sum())
    d_shared = (2.0 / b) * private_f @ c.T
    d_private = (2.0 / b) * shared_f @ c
    return term, d_shared, d_private


def loss_diff(model: DsnModel, source_x: Matrix, target_x: Matrix) -> tuple[float, DiffGrads]:
    """Sum of per-domain cross-correlation penalties between shared and
    private components. Gradients are unscaled; the step applies beta."""
    if not model.has_private:
        raise ContractError("model has no private extractors")
    f_sc, cache_sc = forward(model.shared, source_x)
    f_tc, cache_tc = forward(model.shared, target_x)
    f_sp, cache_sp = forward(model.private_src, source_x)
    f_tp, cache_tp = forward(model.private_tgt, target_x)
    term_s, d_sc, d_sp = cross_correlation_penalty(f_sc, f_sp)
    term_t, d_tc, d_tp = cross_correlation_penalty(f_tc, f_tp)
    g_shared, _ = backward(model.shared, cache_sc, d_sc)
    g_shared_t, _ = backward(model.shared, cache_tc, d_tc)
    g_shared.add_scaled(g_shared_t)
    g_ps, _ = backward(model.private_src, cache_sp, d_sp)
    g_pt, _ = backward(model.private_tgt, cache_tp, d_tp)
    return term_s + term_t, DiffGrads(g_shared, g_ps, g_pt)


def reconstruct(model: DsnModel, x: Matrix, domain: DomainLabel) -> Matrix:
    """Rebuild input frames from [shared, private] components; the shared
    component comes first in the concatenation."""
    if not model.has_private:
        raise ContractError("model has no reconstructor")
    private = model.private_src if domain is DomainLabel.SOURCE else model.private_tgt
    f_c, _ = forward(model.shared, x)
    f_p, _ = forward(private, x)
    out, _ = forward(model.recon, np.hstack([f_c, f_p]))
    return out


def loss_recon(model: DsnModel, source_x: Matrix, target_x: Matrix) -> tuple[float, ReconGrads]:
    """Per-domain mean squared reconstruction error, summed over domains.

    Gradients are unscaled: the step applies gamma on the extractor side and
    feeds the reconstructor the raw gradient.
    """
    if not model.has_private:
        raise ContractError("model has no reconstructor")
    k = model.shared_dim
    f_sc, cache_sc = forward(model.shared, source_x)
    f_tc, cache_tc = forward(model.shared, target_x)
    f_sp, cache_sp = forward(model.private_src, source_x)
    f_tp, cache_tp = forward(model.private_tgt, target_x)
    out_s, cache_rs = forward(model.recon, np.hstack([f_sc, f_sp]))
    out_t, cache_rt = forward(model.recon, np.hstack([f_tc, f_tp]))
    term_s, g_out_s = mse_loss(out_s, source_x)
    term_t, g_out_t = mse_loss(out_t, target_x)
    g_recon, g_in_s = backward(model.recon, cache_rs, g_out_s)
    g_recon_t, g_in_t = backward(model.recon, cache_rt, g_out_t)
    g_recon.add_scaled(g_recon_t)
    g_shared, _ = backward(model.shared, cache_sc, g_in_s[:, :k])
    g_shared_t, _ = backward(model.shared, cache_tc, g_in_t[:, :k])
    g_shared.add_scaled(g_shared_t)
    g_ps, _ = backward(model.private_src, cache_sp, g_in_s[:, k:])
    g_pt, _ = backward(model.private_tgt, cache_tp, g_in_t[:, k:])
    return term_s + term_t, ReconGrads(g_shared, g_ps, g_pt, g_recon)


def total_losses(model: DsnModel, batch: DsnBatch) -> StepTrace:
    """Forward-only evaluation of every loss term; no gradients."""
    f_s, _ = forward(model.shared, batch.source_x)
    f_t, _ = forward(model.shared, batch.target_x)
    y_post, _ = forward(model.senone, f_s)
    l_sen, _ = cross_entropy_loss(y_post, batch.source_y)
    d_post, _ = forward(model.domain, grl_forward(np.vstack([f_s, f_t])))
    labels = _domain_targets(f_s.shape[0], f_t.shape[0])
    l_dom, _ = cross_entropy_loss(d_post, labels)
    accuracy = float((d_post.argmax(axis=1) == labels).mean())
    l_diff = 0.0
    l_rec = 0.0
    if model.has_private:
        f_sp, _ = forward(model.private_src, batch.source_x)
        f_tp, _ = forward(model.private_tgt, batch.target_x)
        l_diff = cross_correlation_penalty(f_s, f_sp)[0] + cross_correlation_penalty(f_t, f_tp)[0]
        out_s, _ = forward(model.recon, np.hstack([f_s, f_sp]))
        out_t, _ = forward(model.recon, np.hstack([f_t, f_tp]))
        l_rec = mse_loss(out_s, batch.source_x)[0] + mse_loss(out_t, batch.target_x)[0]
    total = l_sen + l_dom + model.beta * l_diff + model.gamma * l_rec
    return StepTrace(l_sen, l_dom, l_diff, l_rec, total, accuracy)


def loss_total(model: DsnModel, batch: DsnBatch) -> tuple[StepTrace, DsnGrads]:
    """All loss terms plus the routed per-sub-network gradients.

    Zero coefficients skip their gradient contribution entirely, so a run
    with beta = gamma = 0 accumulates exactly the same floating-point sums as
    the reversal-only baseline.
    """
    l_sen, sen = loss_senone(model, batch.source_x, batch.source_y)
    l_dom, dom = loss_domain(model, batch.source_x, batch.target_x)
    g_shared = sen.shared
    if model.alpha != 0.0:
        g_shared.add_scaled(dom.shared_reversed)
    g_ps = g_pt = g_rec = None
    l_diff = 0.0
    l_rec = 0.0
    if model.has_private:
        l_diff, diff = loss_diff(model, batch.source_x, batch.target_x)
        l_rec, rec = loss_recon(model, batch.source_x, batch.target_x)
        if model.beta != 0.0:
            g_shared.add_scaled(diff.shared, model.beta)
        if model.gamma != 0.0:
            g_shared.add_scaled(rec.shared, model.gamma)
        if model.beta != 0.0 or model.gamma != 0.0:
            g_ps = Gradients.zeros_like(model.private_src)
            g_pt = Gradients.zeros_like(model.private_tgt)
            if model.beta != 0.0:
                g_ps.add_scaled(diff.private_src, model.beta)
                g_pt.add_scaled(diff.private_tgt, model.beta)
            if model.gamma != 0.0:
                g_ps.add_scaled(rec.private_src, model.gamma)
                g_pt.add_scaled(rec.private_tgt, model.gamma)
        g_rec = rec.recon
    total = l_sen + l_dom + model.beta * l_diff + model.gamma * l_rec
    trace = StepTrace(l_sen, l_dom, l_diff, l_rec, total, dom.accuracy)
    grads = DsnGrads(g_shared, sen.senone, dom.domain, g_ps, g_pt, g_rec)
    return trace, grads


def dsn_step(model: DsnModel, batch: DsnBatch, mu: float) -> tuple[DsnModel, StepTrace]:
    """One joint SGD update over every sub-network; mutates the model."""
    trace, grads = loss_total(model, batch)
    if not np.isfinite(trace.loss_total):
        raise TrainingDivergedError(f"non-finite loss: {trace}")
    sgd_update(model.shared, grads.shared, mu)
    sgd_update(model.senone, grads.senone, mu)
    sgd_update(model.domain, grads.domain, mu)
    if grads.private_src is not None:
        sgd_update(model.private_src, grads.private_src, mu)
        sgd_update(model.private_tgt, grads.private_tgt, mu)
    if grads.recon is not None:
        sgd_update(model.recon, grads.recon, mu)
    return model, trace


def adapted_model(model: DsnModel) -> tuple[Mlp, Mlp]:
    """The extractor/head pair used for target-domain classification.

    Returns the live sub-networks, not copies.
    """
    return model.shared, model.senone


# ---------------------------------------------------------------------------
# Serialization: manifest header, then the sub-network blocks in a fixed
# order, each in the dsn-mlp text format.
# ---------------------------------------------------------------------------

_NET_ORDER = ("shared", "senone", "domain", "private_src", "private_tgt", "recon")


def save_dsn_model(model: DsnModel, path: str | Path) -> None:
    present = [name for name in _NET_ORDER if getattr(model, name) is not None]
    lines = [
        "dsn-model v1",
        f"alpha={model.alpha:.17g} beta={model.beta:.17g} gamma={model.gamma:.17g} "
        f"n_h={model.n_h} k={model.shared_dim} q={model.num_classes} "
        f"feature_dim={model.feature_dim}",
        "nets " + " ".join(present),
    ]
    for name in present:
        lines.extend(mlp_to_lines(getattr(model, name)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dsn_model(path: str | Path) -> DsnModel:
    cursor = LineCursor(Path(path).read_text().splitlines(), source=str(path))
    header = cursor.take()
    if header.strip() != "dsn-model v1":
        raise cursor.error(f"expected 'dsn-model v1' header, found {header!r}")
    manifest: dict[str, str] = {}
    for item in cursor.take().split():
        key, _, value = item.partition("=")
        if not value:
            raise cursor.error(f"malformed manifest entry {item!r}")
        manifest[key] = value
    nets_line = cursor.take().split()
    if not nets_line or nets_line[0] != "nets":
        raise cursor.error("expected a 'nets' line")
    present = nets_line[1:]
    if set(present) - set(_NET_ORDER):
        raise cursor.error(f"unknown sub-network names {present}")
    nets: dict[str, Mlp | None] = {name: None for name in _NET_ORDER}
    for name in present:
        nets[name] = mlp_from_cursor(cursor)
    try:
        model = DsnModel(
            shared=nets["shared"],
            senone=nets["senone"],
            domain=nets["domain"],
            private_src=nets["private_src"],
            private_tgt=nets["private_tgt"],
            recon=nets["recon"],
            alpha=float(manifest["alpha"]),
            beta=float(manifest["beta"]),
            gamma=float(manifest["gamma"]),
            n_h=int(manifest["n_h"]),
        )
    except KeyError as exc:
        raise cursor.error(f"manifest is missing {exc}") from None
    for key, expected in (
        ("k", model.shared_dim),
        ("q", model.num_classes),
        ("feature_dim", model.feature_dim),
    ):
        if key in manifest and int(manifest[key]) != expected:
            raise DataError(f"{path}: manifest {key}={manifest[key]} contradicts the nets ({expected})")
    return model
