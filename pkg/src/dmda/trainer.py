"""End-to-end training loop: per-domain sampling, loss assembly, SGD.

One step samples a batch from every source domain, rebuilds the channel
masks from the current auxiliary weights, prunes, computes semantics and
the alignment surrogate, and takes one SGD step. The default mode folds
the approximator's maximization and everyone else's minimization into a
single backward pass through the gradient reversal gate; an alternating
two-pass mode is available for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor, add, backward, scale, softmax_cross_entropy
from .config import TrainConfig
from .mda import grl_lambda, mda_loss, mean_over, surrogate_joint
from .nn import (
    ModelBundle,
    ModelDims,
    forward_expert,
    forward_feature_map,
    init_bundle,
)
from .scp import apply_mask, build_masks, channel_dropout, gap
from .synthdata import Benchmark

DIVERGENCE_LIMIT = 1e6
VALIDATION_FRACTION = 0.2


class TrainingDiverged(Exception):
    pass


class OptimizerError(Exception):
    pass


@dataclass
class OptimizerState:
    """Per-parameter velocity buffers for SGD with momentum."""

    velocities: list
    step_count: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls(velocities=[np.zeros_like(p.data) for p in params])


def sgd_step(params, grads, state: OptimizerState, lr: float, momentum: float,
             weight_decay: float):
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v.

    A None gradient freezes that parameter for this step (no decay, no
    velocity update).
    """
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise OptimizerError(
                f"non-finite gradient for parameter {i} (shape {p.data.shape}); "
                "aborting step")
        v = state.velocities[i]
        v *= momentum
        v += g + weight_decay * p.data
        p.data -= lr * v
    state.step_count += 1


def lr_at(step: int, config: TrainConfig) -> float:
    """Base rate, cut by 10x after each decay point of total steps."""
    lr = config.learning_rate
    for frac in config.lr_decay_points:
        if step >= frac * config.total_steps:
            lr *= 0.1
    return lr


def combine_objective(cla: Tensor, mda: Tensor, exp: Tensor, aux: Tensor,
                      alpha: float, beta: float) -> Tensor:
    """Total = cla + alpha*(mda + exp) + beta*aux."""
    return add(add(cla, scale(add(mda, exp), alpha)), scale(aux, beta))


def _forward_domain(bundle, x, y, masks, dropout_rng, dropout_rate):
    """Shared per-domain forward: pooled aux input and pruned features."""
    fmap = forward_feature_map(bundle, x)
    phi_hat = gap(fmap)
    if masks is not None:
        phi = gap(apply_mask(fmap, masks.rows_for(y)))
    elif dropout_rate > 0:
        dropped = channel_dropout(fmap, dropout_rate, dropout_rng, training=True)
        phi = gap(dropped)
    else:
        phi = phi_hat
    return phi_hat, phi


def _component_losses(bundle, batches, masks, dropout_rng, dropout_rate, lam,
                      use_grl=True):
    cla_terms, aux_terms, exp_terms = [], [], []
    z_batches, indices = [], []
    for i, (x, y) in enumerate(batches):
        phi_hat, phi = _forward_domain(bundle, x, y, masks, dropout_rng,
                                       dropout_rate)
        aux_terms.append(softmax_cross_entropy(bundle.g_a(phi_hat), y))
        cla_terms.append(softmax_cross_entropy(bundle.g(phi), y))
        logits1, semantics = forward_expert(bundle.experts[i], phi)
        exp_terms.append(softmax_cross_entropy(logits1, y))
        z_batches.append(surrogate_joint(phi, semantics))
        indices.append(i)
    mda = mda_loss(bundle.approx, z_batches, indices, lam, use_grl=use_grl)
    return (mean_over(cla_terms), mda, mean_over(exp_terms), mean_over(aux_terms))


def _masks_for_step(bundle, config: TrainConfig, step: int):
    if not config.mask_enabled or step < config.mask_warmup_steps:
        return None
    return build_masks(bundle.g_a.weight.data, config.quantile)


def total_loss(bundle: ModelBundle, domain_batches, config: TrainConfig,
               progress: float, dropout_rng=None, step: int | None = None,
               use_grl: bool = True):
    """Assemble the full objective over one batch per source domain.

    Returns the scalar loss tensor plus a float breakdown of every
    component. With use_grl=False the reversal gate is omitted, making
    the gradient the plain derivative of the returned scalar.
    """
    lam = grl_lambda(progress)
    masks = _masks_for_step(bundle, config, 0 if step is None else step)
    cla, mda, exp, aux = _component_losses(bundle, domain_batches, masks,
                                           dropout_rng, config.dropout_rate, lam,
                                           use_grl=use_grl)
    total = combine_objective(cla, mda, exp, aux, config.alpha, config.beta)
    breakdown = {
        "loss_total": total.item(),
        "loss_cla": cla.item(),
        "loss_mda": mda.item(),
        "loss_exp": exp.item(),
        "loss_aux": aux.item(),
    }
    return total, breakdown


def _zero_grads(params):
    for p in params:
        p.zero_grad()


def _guard(value: float):
    if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise TrainingDiverged(f"total loss {value!r} exceeded divergence limit")


@dataclass
class Snapshot:
    step: int
    bundle: ModelBundle


@dataclass
class TrainResult:
    final: ModelBundle
    best: ModelBundle
    best_step: int
    metrics: list
    snapshots: list


def split_train_validation(batch, fraction: float = VALIDATION_FRACTION):
    """First (1-fraction) of a domain's samples train; the rest validate."""
    n = len(batch.y)
    n_train = n - int(n * fraction)
    return ((batch.x[:n_train], batch.y[:n_train]),
            (batch.x[n_train:], batch.y[n_train:]))


def sample_batch(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    """Uniform with-replacement index draw for one domain."""
    return rng.integers(0, n, size=batch_size)


def predict(bundle: ModelBundle, x: np.ndarray, mask_enabled: bool,
            quantile: float) -> np.ndarray:
    """Inference path: features, optional pruning by predicted label, then g.

    The mask row is chosen by the auxiliary classifier's argmax on the
    unpruned pooled features, then masks come from the current auxiliary
    weights.
    """
    fmap = forward_feature_map(bundle, Tensor(x))
    phi_hat = gap(fmap)
    if mask_enabled:
        y_hat = np.argmax(bundle.g_a(phi_hat).data, axis=1)
        masks = build_masks(bundle.g_a.weight.data, quantile)
        phi = gap(apply_mask(fmap, masks.rows_for(y_hat)))
    else:
        phi = phi_hat
    return np.argmax(bundle.g(phi).data, axis=1)


def evaluate(bundle: ModelBundle, x: np.ndarray, y: np.ndarray,
             mask_enabled: bool, quantile: float) -> float:
    if len(y) == 0:
        raise ValueError("evaluate: empty evaluation set")
    pred = predict(bundle, x, mask_enabled, quantile)
    return float((pred == y).mean())


def validate_select(snapshots, val_x, val_y, mask_enabled: bool, quantile: float):
    """Return the snapshot with highest pooled validation accuracy.

    Ties resolve to the earliest snapshot.
    """
    if not snapshots:
        raise ValueError("validate_select: no snapshots")
    if len(val_y) == 0:
        raise ValueError("validate_select: empty validation set")
    best, best_acc = None, -np.inf
    for snap in snapshots:
        acc = evaluate(snap.bundle, val_x, val_y, mask_enabled, quantile)
        if acc > best_acc:
            best, best_acc = snap, acc
    return best


def _dims_for(benchmark: Benchmark, config: TrainConfig) -> ModelDims:
    h, w, ch = benchmark.input_shape
    return ModelDims(in_h=h, in_w=w, in_channels=ch,
                     conv_channels=config.conv_channels,
                     feature_channels=config.feature_channels,
                     n_classes=benchmark.n_classes,
                     n_domains=len(benchmark.sources),
                     approx_hidden=config.approx_hidden)


def train(config: TrainConfig, benchmark: Benchmark) -> TrainResult:
    """Run the full training loop; deterministic given (config, benchmark)."""
    if len(benchmark.sources) < 2:
        raise ValueError("need at least 2 source domains")
    dims = _dims_for(benchmark, config)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    bundle = init_bundle(dims, seeds[0])
    sample_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])

    splits = [split_train_validation(b) for b in benchmark.sources]
    train_sets = [s[0] for s in splits]
    val_x = np.concatenate([s[1][0] for s in splits])
    val_y = np.concatenate([s[1][1] for s in splits])

    params = bundle.parameters()
    approx_ids = {id(p) for p in bundle.approx_params()}
    state = OptimizerState.for_params(params)
    metrics, snapshots = [], []

    for step in range(config.total_steps):
        progress = step / config.total_steps
        lam = grl_lambda(progress)
        lr = lr_at(step, config)
        batches = []
        for tx, ty in train_sets:
            idx = sample_batch(sample_rng, len(ty), config.batch_size_per_domain)
            batches.append((Tensor(tx[idx]), ty[idx]))

        try:
            if config.grl_mode == "single-pass":
                breakdown = _single_pass_step(bundle, batches, config, progress,
                                              step, dropout_rng, params, state, lr)
            else:
                breakdown = _alternating_step(bundle, batches, config, progress,
                                              step, dropout_rng, params,
                                              approx_ids, state, lr)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value at step {step}: {exc}") from exc

        record = {"step": step, "lr": lr, "lambda": lam, **breakdown}
        is_last = step == config.total_steps - 1
        if (step + 1) % config.snapshot_every == 0 or is_last:
            snapshots.append(Snapshot(step=step, bundle=bundle.copy()))
            record["val_acc"] = evaluate(bundle, val_x, val_y,
                                         config.mask_enabled, config.quantile)
        metrics.append(record)

    if snapshots:
        best_snap = validate_select(snapshots, val_x, val_y,
                                    config.mask_enabled, config.quantile)
        best, best_step = best_snap.bundle, best_snap.step
    else:
        best, best_step = bundle.copy(), -1
    return TrainResult(final=bundle, best=best, best_step=best_step,
                       metrics=metrics, snapshots=snapshots)


def _single_pass_step(bundle, batches, config, progress, step, dropout_rng,
                      params, state, lr):
    with Tape() as tape:
        total, breakdown = total_loss(bundle, batches, config, progress,
                                      dropout_rng=dropout_rng, step=step)
    _guard(breakdown["loss_total"])
    _zero_grads(params)
    backward(tape, total)
    sgd_step(params, [p.grad for p in params], state, lr,
             config.momentum, config.weight_decay)
    return breakdown


def _alternating_step(bundle, batches, config, progress, step, dropout_rng,
                      params, approx_ids, state, lr):
    """Two passes: sharpen the approximator, then update everything else."""
    lam = grl_lambda(progress)
    masks = _masks_for_step(bundle, config, step)

    # Pass 1: approximator maximization (minimize its NLL, no reversal).
    with Tape() as tape:
        _, mda, _, _ = _component_losses(bundle, batches, masks, dropout_rng,
                                         config.dropout_rate, lam=0.0)
        loss_d = scale(mda, config.alpha)
    _zero_grads(params)
    backward(tape, loss_d)
    sgd_step(params, [p.grad if id(p) in approx_ids else None for p in params],
             state, lr, config.momentum, config.weight_decay)
    state.step_count -= 1

    # Pass 2: minimization for the rest; the alignment term enters with a
    # negative sign scaled by the reversal schedule.
    with Tape() as tape:
        cla, mda2, exp, aux = _component_losses(bundle, batches, masks,
                                                dropout_rng, config.dropout_rate,
                                                lam=0.0)
        minim = add(add(cla, scale(add(scale(mda2, -lam), exp), config.alpha)),
                    scale(aux, config.beta))
    breakdown = {
        "loss_total": combine_objective(
            Tensor(cla.data), Tensor(mda2.data), Tensor(exp.data),
            Tensor(aux.data), config.alpha, config.beta).item(),
        "loss_cla": cla.item(),
        "loss_mda": mda2.item(),
        "loss_exp": exp.item(),
        "loss_aux": aux.item(),
    }
    _guard(breakdown["loss_total"])
    _zero_grads(params)
    backward(tape, minim)
    sgd_step(params, [None if id(p) in approx_ids else p.grad for p in params],
             state, lr, config.momentum, config.weight_decay)
    return breakdown


# ---------------------------------------------------------------------------
# Variant harness: ERM / +Dropout / +SCP / full method
# ---------------------------------------------------------------------------

VARIANTS = ("erm", "dropout", "scp", "dmda")


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    """Derive the four comparison configurations from one base config."""
    if variant == "erm":
        return replace(base, alpha=0.0, beta=0.0, mask_enabled=False,
                       dropout_rate=0.0)
    if variant == "dropout":
        # Dropout rate matched to the fraction SCP prunes.
        return replace(base, alpha=0.0, beta=0.0, mask_enabled=False,
                       dropout_rate=base.m)
    if variant == "scp":
        return replace(base, alpha=0.0, mask_enabled=True, dropout_rate=0.0)
    if variant == "dmda":
        return replace(base, mask_enabled=True, dropout_rate=0.0)
    raise ValueError(f"unknown variant {variant!r}; known: {VARIANTS}")


def run_variant(base: TrainConfig, variant: str, benchmark: Benchmark):
    """Train one variant and report its selected-model target accuracy."""
    cfg = variant_config(base, variant)
    result = train(cfg, benchmark)
    acc = evaluate(result.best, benchmark.target.x, benchmark.target.y,
                   cfg.mask_enabled, cfg.quantile)
    return result, acc


def run_ablation(base: TrainConfig, benchmark_builder, seeds,
                 variants=VARIANTS) -> dict:
    """Four-way table: per-variant target accuracies across seeds.

    `benchmark_builder` maps a seed to a Benchmark so that data and
    training vary together.
    """
    table = {v: [] for v in variants}
    for seed in seeds:
        benchmark = benchmark_builder(seed)
        for variant in variants:
            _, acc = run_variant(replace(base, seed=seed), variant, benchmark)
            table[variant].append(acc)
    return table
