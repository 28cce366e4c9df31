"""Reconstruction training: loss, exact gradients, the Adam loop with
early stopping, and the four-variant ablation runner.

The loss is the squared Frobenius reconstruction error of both domains
plus a penalty on the dot product of the two domains' gate vectors,
which pushes the domains to rely on different views. Gradients are
derived by hand against the ForwardTrace; dropout masks and Gumbel
noise are treated as constants of the pass, so a finite-difference
probe that replays the same noise must agree with backward().
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import InteractionDataset, batch_rows
from .errors import ParameterError, ShapeError, TrainingDivergedError
from .evaluation import evaluate
from .model import (ModelConfig, ModelParams, forward, gate_weights, init_params,
                    variant_config)
from .numerics import Rng, adam_step, row_l2_normalize_grad, softmax_rows_grad

# Exact key order of one serialized training-log record.
LOG_KEYS = ("epoch", "loss_total", "loss_rec_s", "loss_rec_t", "loss_orth",
            "val_recall20_s", "val_recall20_t", "val_ndcg20_s", "val_ndcg20_t")

ABLATION_VARIANTS = (("MDAP", "full"), ("MDAP-GS", "no_gumbel"),
                     ("MDAP-MV", "single_view"), ("MDAP-DG", "no_gate"))


def loss(trace, targets_s: np.ndarray, targets_t: np.ndarray,
         lam: float) -> tuple[float, dict[str, float]]:
    """Total loss and its breakdown {rec_s, rec_t, orth}.

    Reconstruction terms are sums of squared errors over every entry of
    the batch rows, zeros included. The orthogonality term is
    lam * (gate_s . gate_t).
    """
    if trace.recon_s.shape != targets_s.shape or trace.recon_t.shape != targets_t.shape:
        raise ShapeError(
            f"target shapes {targets_s.shape}/{targets_t.shape} do not match "
            f"reconstructions {trace.recon_s.shape}/{trace.recon_t.shape}")
    rec_s = float(np.sum((targets_s - trace.recon_s) ** 2))
    rec_t = float(np.sum((targets_t - trace.recon_t) ** 2))
    orth = float(lam * np.dot(trace.gate_s, trace.gate_t))
    total = rec_s + rec_t + orth
    return total, {"rec_s": rec_s, "rec_t": rec_t, "orth": orth}


def backward(trace, targets_s: np.ndarray, targets_t: np.ndarray,
             params: ModelParams, config: ModelConfig) -> dict[str, np.ndarray]:
    """Exact loss gradients for every parameter array.

    Requires a training-mode trace. Returns {field name: gradient} over
    all PARAM_FIELDS; fields outside the active ablation's compute path
    get zero gradients.
    """
    if not trace.training:
        raise ParameterError("backward needs a trace from forward(training=True)")
    if trace.raw_rows.shape[1] != params.n_items_total:
        raise ShapeError("trace and params disagree on the item count")
    k = config.k
    grads = {name: np.zeros_like(arr) for name, arr in params.arrays()}

    d_z = {}
    gate_recon_grad = {}
    for domain, targets, recon, dec_hidden, z in (
            ("s", targets_s, trace.recon_s, trace.dec_hidden_s, trace.z_s),
            ("t", targets_t, trace.recon_t, trace.dec_hidden_t, trace.z_t)):
        cols = params.domain_slice(domain)
        d_recon = 2.0 * (recon - targets)
        grads["dec_w2"][:, cols] += dec_hidden.T @ d_recon
        grads["dec_b2"][cols] += d_recon.sum(axis=0)
        d_hidden = d_recon @ params.dec_w2[:, cols].T
        d_pre = d_hidden * (1.0 - dec_hidden ** 2)
        grads["dec_w1"] += z.T @ d_pre
        grads["dec_b1"] += d_pre.sum(axis=0)
        d_z[domain] = d_pre @ params.dec_w1.T
        gate_recon_grad[domain] = np.array(
            [float(np.sum(d_z[domain] * trace.view_embs[i])) for i in range(k)])

    # Gate table: reconstruction pull plus the orthogonality coupling,
    # through the softmax Jacobian. Uniform gates (no_gate) are constant.
    if config.ablation != "no_gate":
        d_gate_s = gate_recon_grad["s"] + config.lam * trace.gate_t
        d_gate_t = gate_recon_grad["t"] + config.lam * trace.gate_s
        grads["gate"][0] = softmax_rows_grad(trace.gate_s[None, :], d_gate_s[None, :])[0]
        grads["gate"][1] = softmax_rows_grad(trace.gate_t[None, :], d_gate_t[None, :])[0]

    d_assign = np.zeros_like(trace.assign)
    for i in range(k):
        d_emb = trace.gate_s[i] * d_z["s"] + trace.gate_t[i] * d_z["t"]
        grads["enc_w2"] += trace.enc_hidden[i].T @ d_emb
        grads["enc_b2"] += d_emb.sum(axis=0)
        d_hidden = d_emb @ params.enc_w2.T
        d_pre = d_hidden * (1.0 - trace.enc_hidden[i] ** 2)
        grads["enc_w1"] += trace.views[i].T @ d_pre
        grads["enc_b1"] += d_pre.sum(axis=0)
        if config.ablation != "single_view":
            d_view = d_pre @ params.enc_w1.T
            d_assign[:, i] = np.sum(d_view * trace.x, axis=1)

    if config.ablation != "single_view":
        # Tempered softmax back to the logits; Gumbel noise is additive
        # and constant, so the logit gradient passes straight through.
        d_logits = softmax_rows_grad(trace.assign, d_assign, config.tau)
        d_proj = d_logits @ trace.core_norm
        d_core_norm = d_logits.T @ trace.proj
        d_item_norm = trace.x.T @ d_proj
        grads["core_emb"] = row_l2_normalize_grad(params.core_emb, trace.core_norm, d_core_norm)
        grads["item_emb"] = row_l2_normalize_grad(params.item_emb, trace.item_norm, d_item_norm)

    return grads


class AdamOptimizer:
    """Per-array Adam state over a ModelParams instance."""

    def __init__(self, params: ModelParams, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in params.arrays()}
        self.v = {name: np.zeros_like(arr) for name, arr in params.arrays()}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]):
        self.t += 1
        for name, arr in params.arrays():
            updated, self.m[name], self.v[name] = adam_step(
                arr, grads[name], self.m[name], self.v[name], self.t,
                lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
            setattr(params, name, updated)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization protocol around a ModelConfig."""

    model: ModelConfig = field(default_factory=ModelConfig)
    epochs_max: int = 1000
    patience: int = 20
    batch_users: int = 4096
    lr: float = 1e-3
    eval_k: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.epochs_max < 1:
            raise ParameterError(f"epochs_max must be >= 1, got {self.epochs_max}")
        if self.patience < 1:
            raise ParameterError(f"patience must be >= 1, got {self.patience}")
        if self.batch_users < 1:
            raise ParameterError(f"batch_users must be >= 1, got {self.batch_users}")
        if self.lr <= 0.0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if self.eval_k < 1:
            raise ParameterError(f"eval_k must be >= 1, got {self.eval_k}")
        if self.seed < 0:
            raise ParameterError(f"seed must be non-negative, got {self.seed}")


@dataclass
class TrainLog:
    """Per-epoch records plus the best-epoch marker.

    records hold exactly the LOG_KEYS fields; gates keeps the epoch-end
    gate vectors (not serialized) for diagnostics.
    """

    records: list[dict] = field(default_factory=list)
    gates: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    best_epoch: int = -1

    def to_jsonl(self) -> str:
        lines = []
        for rec in self.records:
            ordered = {key: rec[key] for key in LOG_KEYS}
            lines.append(json.dumps(ordered))
        return "\n".join(lines) + ("\n" if lines else "")

    def write(self, path: str):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


def default_validator(dataset: InteractionDataset, config: TrainConfig):
    """Validation-split metric callback used by train()."""
    def run(params: ModelParams, epoch: int) -> dict[str, float]:
        report = evaluate(params, config.model, dataset, "valid", k=config.eval_k)
        return {
            "recall_s": report.domains["s"]["recall"],
            "recall_t": report.domains["t"]["recall"],
            "ndcg_s": report.domains["s"]["ndcg"],
            "ndcg_t": report.domains["t"]["ndcg"],
        }
    return run


def train(dataset: InteractionDataset, config: TrainConfig, eval_fn=None,
          verbose: bool = False) -> tuple[ModelParams, TrainLog]:
    """Fit the model on the dataset's training split.

    Each epoch shuffles the user rows, runs training-mode forward and
    backward over user batches, applies Adam, then scores the validation
    split. Early stopping watches the mean of the two domains' NDCG and
    keeps a snapshot of the best-epoch parameters, which are returned.
    A non-finite loss aborts with TrainingDivergedError.

    eval_fn(params, epoch) may replace the validation callback; it must
    return a dict with recall_s/recall_t/ndcg_s/ndcg_t.
    """
    rng = Rng(config.seed)
    init_rng = rng.derive(0)
    shuffle_rng = rng.derive(1)
    noise_rng = rng.derive(2)

    n_s = dataset.n_items("s")
    params = init_params(config.model, n_s, dataset.n_items("t"), init_rng)
    opt = AdamOptimizer(params, lr=config.lr)
    if eval_fn is None:
        eval_fn = default_validator(dataset, config)

    log = TrainLog()
    best_score = -np.inf
    best_params = params.copy()
    bad_epochs = 0

    for epoch in range(1, config.epochs_max + 1):
        perm = shuffle_rng.permutation(dataset.n_users)
        sums = {"total": 0.0, "rec_s": 0.0, "rec_t": 0.0, "orth": 0.0}
        # overflow inside the epoch is not an error condition by itself: a
        # diverged run is caught by the loss finiteness check below
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, dataset.n_users, config.batch_users):
                batch = perm[start:start + config.batch_users]
                rows = batch_rows(dataset, batch, "train")
                targets_s = rows[:, :n_s]
                targets_t = rows[:, n_s:]
                trace = forward(params, config.model, rows, noise_rng, training=True)
                total, parts = loss(trace, targets_s, targets_t, config.model.lam)
                if not np.isfinite(total):
                    raise TrainingDivergedError(epoch)
                grads = backward(trace, targets_s, targets_t, params, config.model)
                opt.step(params, grads)
                sums["total"] += total
                for key in ("rec_s", "rec_t", "orth"):
                    sums[key] += parts[key]

            metrics = eval_fn(params, epoch)
            log.records.append({
                "epoch": epoch,
                "loss_total": sums["rec_s"] + sums["rec_t"] + sums["orth"],
                "loss_rec_s": sums["rec_s"],
                "loss_rec_t": sums["rec_t"],
                "loss_orth": sums["orth"],
                "val_recall20_s": metrics["recall_s"],
                "val_recall20_t": metrics["recall_t"],
                "val_ndcg20_s": metrics["ndcg_s"],
                "val_ndcg20_t": metrics["ndcg_t"],
            })
            log.gates.append((gate_weights(params, "s", config.model.ablation),
                              gate_weights(params, "t", config.model.ablation)))
        if verbose:
            print(f"epoch {epoch:4d}  loss {log.records[-1]['loss_total']:.4f}  "
                  f"val ndcg s/t {metrics['ndcg_s']:.4f}/{metrics['ndcg_t']:.4f}")

        score = 0.5 * (metrics["ndcg_s"] + metrics["ndcg_t"])
        if score > best_score:
            best_score = score
            best_params = params.copy()
            log.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    return best_params, log


@dataclass
class AblationReport:
    """Test metrics of the four model variants trained with one seed."""

    seed: int
    rows: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "rows": self.rows}

    def format_table(self) -> str:
        header = f"{'variant':<10} {'recall_s':>9} {'ndcg_s':>9} {'recall_t':>9} {'ndcg_t':>9}"
        lines = [header, "-" * len(header)]
        for row in self.rows:
            lines.append(f"{row['variant']:<10} {row['recall_s']:>9.4f} {row['ndcg_s']:>9.4f} "
                         f"{row['recall_t']:>9.4f} {row['ndcg_t']:>9.4f}")
        return "\n".join(lines)


def run_ablation(dataset: InteractionDataset, config: TrainConfig,
                 verbose: bool = False) -> tuple[AblationReport, dict[str, tuple]]:
    """Train all four variants with the same seed and score the test split.

    Returns the report plus {variant name: (params, log)} for callers
    that want the artifacts.
    """
    report = AblationReport(seed=config.seed)
    artifacts: dict[str, tuple] = {}
    for name, ablation in ABLATION_VARIANTS:
        variant = replace(config, model=variant_config(config.model, ablation))
        if verbose:
            print(f"[ablation] training {name} ({ablation})")
        params, log = train(dataset, variant, verbose=False)
        result = evaluate(params, variant.model, dataset, "test", k=config.eval_k)
        report.rows.append({
            "variant": name,
            "ablation": ablation,
            "seed": config.seed,
            "best_epoch": log.best_epoch,
            "recall_s": result.domains["s"]["recall"],
            "ndcg_s": result.domains["s"]["ndcg"],
            "recall_t": result.domains["t"]["recall"],
            "ndcg_t": result.domains["t"]["ndcg"],
        })
        artifacts[name] = (params, log)
    return report, artifacts
