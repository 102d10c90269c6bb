"""Experiment orchestration: pretraining, adaptation, evaluation, sweeps.

Every run is a pure function of (config, seed). Named sub-streams derived
from the master seed keep the reversal-only baseline and the full model on
identical batch schedules, which is what makes the beta = gamma = 0
reduction bit-exact.

Adaptation never reads target labels: file-backed target corpora go through
the unlabeled reader, and the adaptation entry points are never handed the
labeled target test corpus at all.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .data import (
    Corpus,
    cmvn,
    concat_corpora,
    read_corpus,
    read_corpus_unlabeled,
    splice,
    synth_corpus,
)
from .dsn import (
    DsnBatch,
    DsnModel,
    StepTrace,
    adapted_model,
    dsn_step,
    split_pretrained,
)
from .errors import ConfigError, ContractError, DataError, TrainingDivergedError
from .nn import (
    Activation,
    Mlp,
    Rng,
    backward,
    cross_entropy_loss,
    forward,
    init_mlp,
    sgd_update,
)

# Sub-stream ids; part of the reproducibility contract.
STREAM_SOURCE_INIT = 0
STREAM_DOMAIN_INIT = 1
STREAM_PRIVATE_SRC_INIT = 2
STREAM_PRIVATE_TGT_INIT = 3
STREAM_RECON_INIT = 4
STREAM_BATCH_PRETRAIN = 5
STREAM_BATCH_ADAPT = 6

DATA_FILES = {
    "source_train": "source_train.csv",
    "target_adapt": "target_adapt.csv",
    "source_test": "source_test.csv",
    "target_test": "target_test.csv",
}


def _stream(seed: int, stream_id: int) -> Rng:
    return Rng(seed).derive(stream_id)


@dataclass
class PreparedData:
    """Spliced, globally normalized corpora ready for training."""

    source_train: Corpus
    target_adapt: Corpus
    source_test: Corpus
    target_test: Corpus | None
    feature_dim: int


def prepare_corpora(cfg: ExperimentConfig, need_target_labels: bool) -> PreparedData:
    """Load or synthesize corpora, splice, and apply pooled normalization.

    Stats are computed over source_train plus target_adapt (the data an
    unsupervised adaptation run is allowed to see) and applied everywhere.
    The labeled target test corpus is only touched when the caller asks.
    """
    if cfg.data_dir is not None:
        root = Path(cfg.data_dir)
        src_train = read_corpus(root / DATA_FILES["source_train"])
        tgt_adapt = read_corpus_unlabeled(root / DATA_FILES["target_adapt"])
        src_test = read_corpus(root / DATA_FILES["source_test"])
        tgt_test = read_corpus(root / DATA_FILES["target_test"]) if need_target_labels else None
    else:
        bundle = synth_corpus(cfg.synth)
        src_train = bundle.source_train
        tgt_adapt = bundle.target_adapt
        src_test = bundle.source_test
        tgt_test = bundle.target_test if need_target_labels else None
    corpora = [src_train, tgt_adapt, src_test] + ([tgt_test] if tgt_test is not None else [])
    corpora = [splice(c, cfg.splice.left, cfg.splice.right) for c in corpora]
    normalized, _ = cmvn(concat_corpora(corpora[:2]), corpora)
    tgt_test_norm = normalized[3] if tgt_test is not None else None
    return PreparedData(
        source_train=normalized[0],
        target_adapt=normalized[1],
        source_test=normalized[2],
        target_test=tgt_test_norm,
        feature_dim=normalized[0].dim,
    )


class EpochSampler:
    """Without-replacement index batches; reshuffles whenever the pool
    empties, so smaller corpora are resampled to cover larger ones."""

    def __init__(self, n: int, rng: Rng):
        if n < 1:
            raise ContractError("cannot sample from an empty corpus")
        self._n = n
        self._rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def take(self, batch: int) -> np.ndarray:
        out = np.empty(batch, dtype=np.int64)
        filled = 0
        while filled < batch:
            span = min(self._n - self._pos, batch - filled)
            out[filled : filled + span] = self._order[self._pos : self._pos + span]
            self._pos += span
            filled += span
            if self._pos == self._n:
                self._order = self._rng.permutation(self._n)
                self._pos = 0
        return out


# ---------------------------------------------------------------------------
# Network construction
# ---------------------------------------------------------------------------


def _chain_spec(in_dim: int, hidden: Sequence[int], hidden_act: Activation,
                out_dim: int, out_act: Activation) -> list[tuple[int, int, Activation]]:
    spec = []
    prev = in_dim
    for width in hidden:
        spec.append((prev, width, hidden_act))
        prev = width
    spec.append((prev, out_dim, out_act))
    return spec


def source_net_spec(cfg: ExperimentConfig, feature_dim: int) -> list[tuple[int, int, Activation]]:
    return _chain_spec(feature_dim, cfg.net.source_hidden, Activation.SIGMOID,
                       cfg.synth.num_classes, Activation.SOFTMAX)


def build_dsn(cfg: ExperimentConfig, source_dnn: Mlp, with_private: bool) -> DsnModel:
    """Split the pretrained classifier and attach freshly initialized heads.

    The reversal-only baseline (with_private=False) carries no private
    extractors or reconstructor and forces beta = gamma = 0.
    """
    shared, senone = split_pretrained(source_dnn, cfg.n_h)
    k = shared.out_dim
    feature_dim = shared.in_dim
    domain = init_mlp(
        _chain_spec(k, cfg.net.domain_hidden, Activation.RELU, 2, Activation.SOFTMAX),
        _stream(cfg.seed, STREAM_DOMAIN_INIT),
    )
    private_src = private_tgt = recon = None
    beta, gamma = (cfg.beta, cfg.gamma) if with_private else (0.0, 0.0)
    if with_private:
        private_src = init_mlp(
            _chain_spec(feature_dim, cfg.net.private_hidden, Activation.RELU, k, Activation.SIGMOID),
            _stream(cfg.seed, STREAM_PRIVATE_SRC_INIT),
        )
        private_tgt = init_mlp(
            _chain_spec(feature_dim, cfg.net.private_hidden, Activation.RELU, k, Activation.SIGMOID),
            _stream(cfg.seed, STREAM_PRIVATE_TGT_INIT),
        )
        recon = init_mlp(
            _chain_spec(2 * k, cfg.net.recon_hidden, Activation.RELU, feature_dim, Activation.LINEAR),
            _stream(cfg.seed, STREAM_RECON_INIT),
        )
    return DsnModel(
        shared=shared,
        senone=senone,
        domain=domain,
        private_src=private_src,
        private_tgt=private_tgt,
        recon=recon,
        alpha=cfg.alpha,
        beta=beta,
        gamma=gamma,
        n_h=cfg.n_h,
    )


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EpochTrace:
    epoch: int
    loss_senone: float
    loss_domain: float
    loss_diff: float
    loss_recon: float
    loss_total: float


@dataclass
class EvalResult:
    frames: int
    errors: int
    error_rate: float
    confusion: np.ndarray  # (true, predicted) counts


@dataclass
class RunReport:
    mode: str
    trace: list[EpochTrace]
    evals: dict[str, EvalResult]


def evaluate(nets: Sequence[Mlp], corpus: Corpus) -> EvalResult:
    """Frame error rate of the chained nets; argmax ties break toward the
    lowest class index."""
    if not corpus.is_labeled:
        raise ContractError("evaluation needs a labeled corpus")
    q = nets[-1].out_dim
    if int(corpus.labels.max()) >= q:
        raise DataError(f"label {int(corpus.labels.max())} out of range for {q} classes")
    x = corpus.features
    for net in nets:
        x, _ = forward(net, x)
    pred = x.argmax(axis=1)
    errors = int((pred != corpus.labels).sum())
    confusion = np.zeros((q, q), dtype=np.int64)
    np.add.at(confusion, (corpus.labels, pred), 1)
    return EvalResult(len(corpus), errors, errors / len(corpus), confusion)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _steps_per_epoch(n: int, batch: int) -> int:
    steps = n // batch
    if steps < 1:
        raise ConfigError(f"batch size {batch} exceeds corpus size {n}")
    return steps


def pretrain_source(
    cfg: ExperimentConfig, source_train: Corpus, source_test: Corpus | None = None
) -> tuple[Mlp, RunReport]:
    """Minibatch cross-entropy training of the source classifier."""
    if not source_train.is_labeled:
        raise ContractError("pretraining needs a labeled source corpus")
    net = _init_source_net(cfg, source_train.dim)
    schedule = _stream(cfg.seed, STREAM_BATCH_PRETRAIN)
    trace: list[EpochTrace] = []
    x_all, y_all = source_train.features, source_train.labels
    if cfg.epochs > 0:
        steps = _steps_per_epoch(len(source_train), cfg.batch)
        sampler = EpochSampler(len(source_train), schedule)
        for epoch in range(1, cfg.epochs + 1):
            total = 0.0
            for _ in range(steps):
                idx = sampler.take(cfg.batch)
                post, cache = forward(net, x_all[idx])
                loss, g_logits = cross_entropy_loss(post, y_all[idx])
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
                grads, _ = backward(net, cache, g_logits, at_logits=True)
                sgd_update(net, grads, cfg.mu)
                total += loss
            mean = total / steps
            trace.append(EpochTrace(epoch, mean, 0.0, 0.0, 0.0, mean))
    evals = {}
    if source_test is not None:
        evals["source_test"] = evaluate((net,), source_test)
    return net, RunReport("pretrain", trace, evals)


def _init_source_net(cfg: ExperimentConfig, feature_dim: int) -> Mlp:
    return init_mlp(source_net_spec(cfg, feature_dim), _stream(cfg.seed, STREAM_SOURCE_INIT))


def _adapt(
    cfg: ExperimentConfig,
    source_dnn: Mlp,
    source_train: Corpus,
    target_adapt: Corpus,
    source_test: Corpus | None,
    with_private: bool,
) -> tuple[DsnModel, RunReport]:
    if not source_train.is_labeled:
        raise ContractError("adaptation needs a labeled source corpus")
    if source_train.dim != target_adapt.dim:
        raise DataError("source and target corpora disagree on feature dim")
    model = build_dsn(cfg, source_dnn, with_private)
    schedule = _stream(cfg.seed, STREAM_BATCH_ADAPT)
    trace: list[EpochTrace] = []
    xs, ys = source_train.features, source_train.labels
    xt = target_adapt.features
    if cfg.epochs > 0:
        steps = _steps_per_epoch(max(len(source_train), len(target_adapt)), cfg.batch)
        src_sampler = EpochSampler(len(source_train), schedule)
        tgt_sampler = EpochSampler(len(target_adapt), schedule)
        for epoch in range(1, cfg.epochs + 1):
            sums = np.zeros(5)
            for _ in range(steps):
                si = src_sampler.take(cfg.batch)
                ti = tgt_sampler.take(cfg.batch)
                batch = DsnBatch(xs[si], ys[si], xt[ti])
                _, step_trace = dsn_step(model, batch, cfg.mu)
                sums += (
                    step_trace.loss_senone,
                    step_trace.loss_domain,
                    step_trace.loss_diff,
                    step_trace.loss_recon,
                    step_trace.loss_total,
                )
            means = sums / steps
            trace.append(EpochTrace(epoch, *means))
    evals = {}
    if source_test is not None:
        evals["source_test"] = evaluate(adapted_model(model), source_test)
    mode = "adapt_dsn" if with_private else "adapt_grl"
    return model, RunReport(mode, trace, evals)


def adapt_grl(
    cfg: ExperimentConfig,
    source_dnn: Mlp,
    source_train: Corpus,
    target_adapt: Corpus,
    source_test: Corpus | None = None,
) -> tuple[DsnModel, RunReport]:
    """Reversal-only baseline: no private extractors, beta = gamma = 0."""
    return _adapt(cfg, source_dnn, source_train, target_adapt, source_test, with_private=False)


def adapt_dsn(
    cfg: ExperimentConfig,
    source_dnn: Mlp,
    source_train: Corpus,
    target_adapt: Corpus,
    source_test: Corpus | None = None,
) -> tuple[DsnModel, RunReport]:
    """Full model: private extractors and reconstructor freshly initialized."""
    return _adapt(cfg, source_dnn, source_train, target_adapt, source_test, with_private=True)


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    n_h_values: tuple[int, ...]
    alpha_values: tuple[float, ...]
    grid: np.ndarray  # target test error per (n_h, alpha); NaN marks a failed cell

    def row_averages(self) -> np.ndarray:
        return self.grid.mean(axis=1)


def sweep(
    cfg: ExperimentConfig,
    source_dnn: Mlp,
    source_train: Corpus,
    target_adapt: Corpus,
    target_test: Corpus,
) -> SweepResult:
    """Full adaptation run per (n_h, alpha) cell on identical data and seed.

    A diverged cell is recorded as NaN without aborting the rest; its row
    average is NaN as well.
    """
    grid = np.full((len(cfg.sweep_n_h), len(cfg.sweep_alpha)), np.nan)
    for i, n_h in enumerate(cfg.sweep_n_h):
        for j, alpha in enumerate(cfg.sweep_alpha):
            cell_cfg = replace(cfg, n_h=n_h, alpha=alpha)
            try:
                model, _ = adapt_dsn(cell_cfg, source_dnn, source_train, target_adapt)
                grid[i, j] = evaluate(adapted_model(model), target_test).error_rate
            except TrainingDivergedError:
                pass
    return SweepResult(tuple(cfg.sweep_n_h), tuple(cfg.sweep_alpha), grid)


# ---------------------------------------------------------------------------
# CSV writers
# ---------------------------------------------------------------------------


def write_trace_csv(trace: Sequence[EpochTrace], path: str | Path) -> None:
    lines = ["epoch,loss_senone,loss_domain,loss_diff,loss_recon,loss_total"]
    for row in trace:
        lines.append(
            f"{row.epoch},{row.loss_senone:.17g},{row.loss_domain:.17g},"
            f"{row.loss_diff:.17g},{row.loss_recon:.17g},{row.loss_total:.17g}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_report_csv(report: RunReport, path: str | Path) -> None:
    """Long-format metrics: kind,corpus,a,b,value."""
    lines = ["kind,corpus,a,b,value"]
    lines.append(f"mode,,,,{report.mode}")
    for name, result in report.evals.items():
        lines.append(f"frames,{name},,,{result.frames}")
        lines.append(f"errors,{name},,,{result.errors}")
        lines.append(f"error_rate,{name},,,{result.error_rate:.17g}")
        true_idx, pred_idx = np.nonzero(result.confusion)
        for t, p in zip(true_idx, pred_idx):
            lines.append(f"confusion,{name},{t},{p},{result.confusion[t, p]}")
    if report.trace:
        last = report.trace[-1]
        lines.append(f"final_loss,,senone,,{last.loss_senone:.17g}")
        lines.append(f"final_loss,,total,,{last.loss_total:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_sweep_csv(result: SweepResult, path: str | Path) -> None:
    header = "n_h," + ",".join(f"{a:g}" for a in result.alpha_values) + ",avg"
    lines = [header]
    avgs = result.row_averages()
    for i, n_h in enumerate(result.n_h_values):
        cells = ",".join(f"{v:.17g}" for v in result.grid[i])
        lines.append(f"{n_h},{cells},{avgs[i]:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Trend experiment: unadapted vs reversal-only vs full model over seeds
# ---------------------------------------------------------------------------


@dataclass
class TrendSeedResult:
    seed: int
    unadapted_src: float
    unadapted_tgt: float
    grl_src: float
    grl_tgt: float
    dsn_src: float
    dsn_tgt: float
    dsn_recon_first: float
    dsn_recon_last: float


@dataclass
class TrendResult:
    rows: list[TrendSeedResult]

    def median(self, field_name: str) -> float:
        return statistics.median(getattr(r, field_name) for r in self.rows)


def trend_profile(seed: int) -> ExperimentConfig:
    """Canonical toy trend profile: 10k source frames, 10k target frames,
    channel scale 0.3, noise std 1.0, 30 epochs."""
    cfg = ExperimentConfig()
    return replace(
        cfg,
        synth=replace(cfg.synth, seed=seed),
        seed=seed,
    )


def run_trend(
    seeds: Sequence[int] = (1, 2, 3, 4, 5),
    pretrain_mu: float = 1.0,
    adapt_mu: float = 0.2,
    alpha: float = 1.0,
    beta: float = 0.25,
    gamma: float = 0.25,
    out_dir: str | Path | None = None,
) -> TrendResult:
    rows = []
    for seed in seeds:
        cfg = trend_profile(seed)
        prepared = prepare_corpora(cfg, need_target_labels=True)
        dnn, _ = pretrain_source(replace(cfg, mu=pretrain_mu), prepared.source_train)
        una_src = evaluate((dnn,), prepared.source_test).error_rate
        una_tgt = evaluate((dnn,), prepared.target_test).error_rate
        adapt_cfg = replace(cfg, mu=adapt_mu, alpha=alpha, beta=beta, gamma=gamma)
        grl_model, _ = adapt_grl(adapt_cfg, dnn, prepared.source_train, prepared.target_adapt)
        dsn_model, dsn_report = adapt_dsn(adapt_cfg, dnn, prepared.source_train, prepared.target_adapt)
        rows.append(
            TrendSeedResult(
                seed=seed,
                unadapted_src=una_src,
                unadapted_tgt=una_tgt,
                grl_src=evaluate(adapted_model(grl_model), prepared.source_test).error_rate,
                grl_tgt=evaluate(adapted_model(grl_model), prepared.target_test).error_rate,
                dsn_src=evaluate(adapted_model(dsn_model), prepared.source_test).error_rate,
                dsn_tgt=evaluate(adapted_model(dsn_model), prepared.target_test).error_rate,
                dsn_recon_first=dsn_report.trace[0].loss_recon,
                dsn_recon_last=dsn_report.trace[-1].loss_recon,
            )
        )
    result = TrendResult(rows)
    if out_dir is not None:
        write_trend_csv(result, Path(out_dir) / "trend.csv")
    return result


def write_trend_csv(result: TrendResult, path: str | Path) -> None:
    fields = (
        "unadapted_src", "unadapted_tgt", "grl_src", "grl_tgt",
        "dsn_src", "dsn_tgt", "dsn_recon_first", "dsn_recon_last",
    )
    lines = ["seed," + ",".join(fields)]
    for row in result.rows:
        lines.append(str(row.seed) + "," + ",".join(f"{getattr(row, f):.17g}" for f in fields))
    lines.append("median," + ",".join(f"{result.median(f):.17g}" for f in fields))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")
