"""Model core: preference encoding over stochastic views with domain
gates, plus checkpoint serialization.

A batch of users enters as concatenated interaction rows over both
domains' items. The rows are L2-normalized and corrupted once by
dropout; that corrupted input drives both the view-assignment logits
and the per-view encoder inputs. Soft view assignments come from a
Gumbel-Softmax over similarity logits between the user rows and a set
of view anchors in item-embedding space. Each view's masked input is
encoded by a shared MLP, the per-domain gate mixes the view embeddings,
and a shared decoder reconstructs the full item space, sliced per
domain.

Ablations:
  full        complete model
  no_gumbel   deterministic softmax assignment (no Gumbel noise)
  single_view one view, no assignment step (k forced to 1)
  no_gate     uniform 1/k view mixing, gate table unused
"""

import json
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import CheckpointError, ParameterError, ShapeError
from .numerics import (DropoutMask, Rng, matmul, row_l2_normalize, sample_dropout_mask,
                       sample_gumbel, softmax_rows)

ABLATIONS = ("full", "no_gumbel", "single_view", "no_gate")

CHECKPOINT_MAGIC = b"MDAPCKPT"
CHECKPOINT_VERSION = 1

# Serialization order of the parameter arrays in a checkpoint.
PARAM_FIELDS = ("item_emb", "core_emb", "enc_w1", "enc_b1", "enc_w2", "enc_b2",
                "dec_w1", "dec_b1", "dec_w2", "dec_b2", "gate")


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the model itself.

    k            number of preference views
    embed_dim    embedding width of views and users
    hidden       width of the encoder/decoder hidden layer
    tau          assignment softmax temperature
    keep_prob    input dropout keep probability (1 = no dropout)
    lam          weight of the gate orthogonality penalty
    ablation     one of ABLATIONS; single_view forces k to 1
    """

    k: int = 8
    embed_dim: int = 64
    hidden: int = 256
    tau: float = 0.2
    keep_prob: float = 0.5
    lam: float = 0.5
    ablation: str = "full"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ParameterError(f"unknown ablation {self.ablation!r}, expected {ABLATIONS}")
        if self.ablation == "single_view" and self.k != 1:
            object.__setattr__(self, "k", 1)
        if self.k < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")
        if self.embed_dim < 1 or self.hidden < 1:
            raise ParameterError("embed_dim and hidden must be >= 1")
        if self.tau <= 0.0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ParameterError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if self.lam < 0.0:
            raise ParameterError(f"lam must be >= 0, got {self.lam}")


@dataclass
class ModelParams:
    """All trainable arrays plus the domain item counts.

    Shapes (N = n_items_s + n_items_t, l = embed_dim, h = hidden):
      item_emb (N, l), core_emb (k, l),
      enc_w1 (N, h), enc_b1 (h,), enc_w2 (h, l), enc_b2 (l,),
      dec_w1 (l, h), dec_b1 (h,), dec_w2 (h, N), dec_b2 (N,),
      gate (2, k) with row 0 = domain s, row 1 = domain t.
    """

    item_emb: np.ndarray
    core_emb: np.ndarray
    enc_w1: np.ndarray
    enc_b1: np.ndarray
    enc_w2: np.ndarray
    enc_b2: np.ndarray
    dec_w1: np.ndarray
    dec_b1: np.ndarray
    dec_w2: np.ndarray
    dec_b2: np.ndarray
    gate: np.ndarray
    n_items_s: int
    n_items_t: int

    @property
    def n_items_total(self) -> int:
        return self.n_items_s + self.n_items_t

    def arrays(self):
        for name in PARAM_FIELDS:
            yield name, getattr(self, name)

    def copy(self) -> "ModelParams":
        kwargs = {name: arr.copy() for name, arr in self.arrays()}
        return ModelParams(n_items_s=self.n_items_s, n_items_t=self.n_items_t, **kwargs)

    def domain_slice(self, domain: str) -> slice:
        if domain == "s":
            return slice(0, self.n_items_s)
        if domain == "t":
            return slice(self.n_items_s, self.n_items_total)
        raise ParameterError(f"unknown domain {domain!r}")


def glorot_uniform(rng: Rng, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return (2.0 * rng.uniform(rows, cols) - 1.0) * limit


def init_params(config: ModelConfig, n_items_s: int, n_items_t: int, rng: Rng) -> ModelParams:
    """Glorot-uniform weights and embeddings, zero biases and gate table.

    Draw order follows PARAM_FIELDS so initialization is reproducible.
    """
    if n_items_s < 1 or n_items_t < 1:
        raise ParameterError("both domains need at least one item")
    n = n_items_s + n_items_t
    l, h, k = config.embed_dim, config.hidden, config.k
    return ModelParams(
        item_emb=glorot_uniform(rng, n, l),
        core_emb=glorot_uniform(rng, k, l),
        enc_w1=glorot_uniform(rng, n, h),
        enc_b1=np.zeros(h),
        enc_w2=glorot_uniform(rng, h, l),
        enc_b2=np.zeros(l),
        dec_w1=glorot_uniform(rng, l, h),
        dec_b1=np.zeros(h),
        dec_w2=glorot_uniform(rng, h, n),
        dec_b2=np.zeros(n),
        gate=np.zeros((2, k)),
        n_items_s=n_items_s,
        n_items_t=n_items_t,
    )


def category_logits(params: ModelParams, raw_rows: np.ndarray, keep_prob: float = 1.0,
                    rng: Rng | None = None, training: bool = False) -> np.ndarray:
    """Similarity logits between user rows and the view anchors.

    Rows are L2-normalized, dropout-corrupted when training, projected
    through the normalized item embeddings and matched against the
    normalized anchors: C = drop(norm(rows)) @ norm(item_emb) @ norm(core_emb)^T.
    An all-zero row yields an all-zero logit row.
    """
    if raw_rows.shape[1] != params.n_items_total:
        raise ShapeError(
            f"rows have {raw_rows.shape[1]} columns, params expect {params.n_items_total}")
    x = row_l2_normalize(raw_rows)
    if training and keep_prob < 1.0:
        if rng is None:
            raise ParameterError("training-mode logits need an Rng for dropout")
        x = sample_dropout_mask(rng, x.shape[0], x.shape[1], keep_prob).apply(x)
    return project_logits(x, row_l2_normalize(params.item_emb),
                          row_l2_normalize(params.core_emb))


def project_logits(x: np.ndarray, item_norm: np.ndarray, core_norm: np.ndarray) -> np.ndarray:
    """C = x @ item_norm @ core_norm^T for pre-normalized operands."""
    return matmul(matmul(x, item_norm), core_norm.T)


def gumbel_softmax_assign(logits: np.ndarray, tau: float, rng: Rng | None = None,
                          training: bool = False, ablation: str = "full",
                          gumbel: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Soft view assignment rows on the probability simplex.

    Training mode (ablation != no_gumbel) perturbs the logits with fresh
    standard Gumbel noise before the tempered softmax; evaluation and
    no_gumbel use the logits as they are. Pass `gumbel` to reuse frozen
    noise. Returns (assignment, noise or None).
    """
    noisy = ablation != "no_gumbel" and training
    if noisy:
        if gumbel is None:
            if rng is None:
                raise ParameterError("training-mode assignment needs an Rng")
            gumbel = sample_gumbel(rng, logits.shape[0], logits.shape[1])
        return softmax_rows(logits + gumbel, tau), gumbel
    return softmax_rows(logits, tau), None


def view_inputs(x: np.ndarray, assign: np.ndarray) -> list[np.ndarray]:
    """Per-view masked copies of x: view i is x scaled by assignment column i.

    Because assignment rows sum to one, the view inputs sum back to x.
    """
    if x.shape[0] != assign.shape[0]:
        raise ShapeError(f"x has {x.shape[0]} rows, assignment has {assign.shape[0]}")
    return [x * assign[:, i:i + 1] for i in range(assign.shape[1])]


def encode_rows(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shared two-layer tanh encoder. Returns (hidden, embedding)."""
    hidden = np.tanh(matmul(x, params.enc_w1) + params.enc_b1)
    return hidden, matmul(hidden, params.enc_w2) + params.enc_b2


def encode_view(params: ModelParams, r_tilde: np.ndarray, keep_prob: float = 1.0,
                rng: Rng | None = None, training: bool = False) -> np.ndarray:
    """Encode one view's input rows, with input dropout when training.

    Inside forward() the corruption already happened upstream on the
    shared normalized input, so this standalone form is for direct use.
    """
    x = r_tilde
    if training and keep_prob < 1.0:
        if rng is None:
            raise ParameterError("training-mode encoding needs an Rng for dropout")
        x = sample_dropout_mask(rng, x.shape[0], x.shape[1], keep_prob).apply(x)
    return encode_rows(params, x)[1]


def gate_weights(params: ModelParams, domain: str, ablation: str = "full") -> np.ndarray:
    """Per-domain view mixing weights on the simplex.

    Softmax of the domain's gate row; the no_gate ablation returns the
    uniform vector and ignores the table.
    """
    k = params.gate.shape[1]
    if ablation == "no_gate":
        return np.full(k, 1.0 / k)
    row = 0 if domain == "s" else 1 if domain == "t" else None
    if row is None:
        raise ParameterError(f"unknown domain {domain!r}")
    return softmax_rows(params.gate[row:row + 1], 1.0)[0]


def combine_views(view_embs: list[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """Weighted sum of the view embeddings."""
    if len(view_embs) != weights.shape[0]:
        raise ShapeError(f"{len(view_embs)} view embeddings vs {weights.shape[0]} weights")
    z = np.zeros_like(view_embs[0])
    for w, e in zip(weights, view_embs):
        z = z + w * e
    return z


def decode(params: ModelParams, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shared two-layer tanh decoder into the full item space.

    Returns (hidden, scores over all n_items_s + n_items_t columns);
    a domain's reconstruction is its column slice of the scores.
    """
    hidden = np.tanh(matmul(z, params.dec_w1) + params.dec_b1)
    return hidden, matmul(hidden, params.dec_w2) + params.dec_b2


@dataclass
class ForwardTrace:
    """Every intermediate of one forward pass, kept for backprop.

    Noise and dropout masks are stored so the backward pass can treat
    them as constants, and so a finite-difference probe can replay the
    exact same stochastic pass.
    """

    config: ModelConfig
    training: bool
    raw_rows: np.ndarray
    x_norm: np.ndarray
    input_mask: DropoutMask | None
    x: np.ndarray                      # normalized, dropout-corrupted input
    item_norm: np.ndarray | None
    core_norm: np.ndarray | None
    proj: np.ndarray | None            # x @ item_norm
    logits: np.ndarray | None
    gumbel: np.ndarray | None
    assign: np.ndarray
    views: list[np.ndarray] = field(default_factory=list)
    enc_hidden: list[np.ndarray] = field(default_factory=list)
    view_embs: list[np.ndarray] = field(default_factory=list)
    gate_s: np.ndarray | None = None
    gate_t: np.ndarray | None = None
    z_s: np.ndarray | None = None
    z_t: np.ndarray | None = None
    dec_hidden_s: np.ndarray | None = None
    dec_hidden_t: np.ndarray | None = None
    recon_s: np.ndarray | None = None
    recon_t: np.ndarray | None = None


def forward(params: ModelParams, config: ModelConfig, raw_rows: np.ndarray,
            rng: Rng | None = None, training: bool = False,
            gumbel: np.ndarray | None = None,
            input_mask: DropoutMask | None = None) -> ForwardTrace:
    """Run the full model on a batch of concatenated interaction rows.

    The normalized input is corrupted by one shared dropout mask that
    feeds both the assignment logits and the view encoder, so the view
    inputs still sum to the corrupted input exactly. Evaluation mode is
    deterministic: no noise, no dropout. `gumbel` and `input_mask`
    override fresh sampling with frozen values (used by gradient
    checks); sampling order is input mask first, then Gumbel noise.
    """
    if raw_rows.ndim != 2 or raw_rows.shape[1] != params.n_items_total:
        raise ShapeError(
            f"expected rows of width {params.n_items_total}, got {raw_rows.shape}")
    b = raw_rows.shape[0]
    x_norm = row_l2_normalize(raw_rows)

    mask = None
    x = x_norm
    if training and config.keep_prob < 1.0:
        mask = input_mask
        if mask is None:
            if rng is None:
                raise ParameterError("training-mode forward needs an Rng")
            mask = sample_dropout_mask(rng, b, x_norm.shape[1], config.keep_prob)
        x = mask.apply(x_norm)

    if config.ablation == "single_view":
        assign = np.ones((b, 1))
        item_norm = core_norm = proj = logits = noise = None
        views = [x]
    else:
        item_norm = row_l2_normalize(params.item_emb)
        core_norm = row_l2_normalize(params.core_emb)
        proj = matmul(x, item_norm)
        logits = matmul(proj, core_norm.T)
        assign, noise = gumbel_softmax_assign(
            logits, config.tau, rng, training, config.ablation, gumbel=gumbel)
        views = view_inputs(x, assign)

    enc_hidden = []
    view_embs = []
    for r_tilde in views:
        hidden, emb = encode_rows(params, r_tilde)
        enc_hidden.append(hidden)
        view_embs.append(emb)

    gate_s = gate_weights(params, "s", config.ablation)
    gate_t = gate_weights(params, "t", config.ablation)
    z_s = combine_views(view_embs, gate_s)
    z_t = combine_views(view_embs, gate_t)
    dec_hidden_s, scores_s = decode(params, z_s)
    dec_hidden_t, scores_t = decode(params, z_t)

    return ForwardTrace(
        config=config, training=training, raw_rows=raw_rows, x_norm=x_norm,
        input_mask=mask, x=x, item_norm=item_norm, core_norm=core_norm, proj=proj,
        logits=logits, gumbel=noise, assign=assign, views=views,
        enc_hidden=enc_hidden, view_embs=view_embs, gate_s=gate_s, gate_t=gate_t,
        z_s=z_s, z_t=z_t, dec_hidden_s=dec_hidden_s, dec_hidden_t=dec_hidden_t,
        recon_s=scores_s[:, params.domain_slice("s")],
        recon_t=scores_t[:, params.domain_slice("t")])


def config_to_dict(config: ModelConfig) -> dict:
    return {f.name: getattr(config, f.name) for f in fields(config)}


def config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d)


def save_checkpoint(path: str, params: ModelParams, config: ModelConfig,
                    extra: dict | None = None):
    """Write params + config to a versioned binary file.

    Layout: magic, u32 version, u64 header length, JSON header (config,
    item counts, shape table, optional extra metadata), then each
    parameter array's raw little-endian float64 bytes in PARAM_FIELDS
    order. Round-trips bit exactly.
    """
    header = {
        "config": config_to_dict(config),
        "n_items_s": params.n_items_s,
        "n_items_t": params.n_items_t,
        "shapes": {name: list(arr.shape) for name, arr in params.arrays()},
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[ModelParams, ModelConfig, dict]:
    """Read a checkpoint written by save_checkpoint.

    Returns (params, config, extra metadata). Raises CheckpointError on
    a bad magic, unsupported version, or truncated data.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 12 or raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version = struct.unpack_from("<I", raw, off)[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off += 4
    header_len = struct.unpack_from("<Q", raw, off)[0]
    off += 8
    try:
        header = json.loads(raw[off:off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    off += header_len
    config = config_from_dict(header["config"])
    arrays = {}
    for name in PARAM_FIELDS:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated at field {name}")
        arrays[name] = np.frombuffer(raw[off:off + nbytes], dtype="<f8").reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    params = ModelParams(n_items_s=int(header["n_items_s"]),
                         n_items_t=int(header["n_items_t"]), **arrays)
    return params, config, header.get("extra", {})


def variant_config(base: ModelConfig, ablation: str) -> ModelConfig:
    """Base config re-targeted at an ablation (single_view drops k to 1)."""
    if ablation == "single_view":
        return replace(base, ablation=ablation, k=1)
    return replace(base, ablation=ablation)
