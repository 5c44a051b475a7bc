"""Matrix-product-state factorization of the patch classifier weights.

The classifier's weight tensor over a K*K patch has one d-wide feature index
per pixel plus one output index with K*K logit channels. Storing it densely
is hopeless (d**(K*K) entries), so it is factored into a chain of order-3
cores linked by bond indices of extent ``bond_dim``; a single core in the
chain is order-4 and carries the output index.

Evaluation contracts each core with its pixel's feature vector, giving one
bond x bond matrix per site, and multiplies those matrices left to right
through the chain. Gradients come from cached left/right partial products
("environments"): one forward sweep plus one reverse sweep, no taped
autodiff. Everything here is plain float64 numpy and deterministic.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CapacityError,
    DomainError,
    FormatError,
    NumericError,
    ShapeError,
    StateError,
)
from .tensor import DenseTensor

__all__ = [
    "MpsModel",
    "ForwardCache",
    "init_mps",
    "forward",
    "backward",
    "materialize_weight_tensor",
    "decompose_weight_tensor",
    "parameter_count",
    "save_checkpoint",
    "load_checkpoint",
    "flatten_cores",
    "unflatten_cores",
]

CHECKPOINT_FORMAT_VERSION = 1

# chain products above this magnitude abort with a NumericError
OVERFLOW_LIMIT = 1e300

INIT_NOISE_STD = 1e-2


@dataclass
class MpsModel:
    """Chain of cores; ``cores[output_site]`` is order-4 (feature, left bond,
    right bond, output channel), every other core is order-3.

    ``stride`` is set when the chain maps to K x K patches (n_sites and
    output_dim both equal stride**2); free-form chains leave it None.
    """

    cores: list
    output_site: int
    local_dim: int
    bond_dim: int
    stride: int | None = None
    seed: int | None = None
    feature_map: str = "sinusoidal"

    def __post_init__(self):
        n = len(self.cores)
        if n == 0:
            raise ShapeError("model needs at least one core")
        if not 0 <= self.output_site < n:
            raise ShapeError(f"output site {self.output_site} out of range for {n} cores")
        self.cores = [np.asarray(c, dtype=np.float64) for c in self.cores]
        for j, core in enumerate(self.cores):
            want = 4 if j == self.output_site else 3
            if core.ndim != want:
                raise ShapeError(f"core {j} must be order-{want}, got order-{core.ndim}")
            if core.shape[0] != self.local_dim:
                raise ShapeError(
                    f"core {j} feature extent {core.shape[0]} != local_dim {self.local_dim}"
                )
            if not np.isfinite(core).all():
                raise ShapeError(f"core {j} contains non-finite values")
        if self.cores[0].shape[1] != 1 or self.cores[-1].shape[2] != 1:
            raise ShapeError("boundary cores must have bond extent 1 on the outside")
        for j in range(n - 1):
            if self.cores[j].shape[2] != self.cores[j + 1].shape[1]:
                raise ShapeError(
                    f"bond mismatch between cores {j} and {j + 1}: "
                    f"{self.cores[j].shape[2]} vs {self.cores[j + 1].shape[1]}"
                )
        if self.stride is not None:
            if n != self.stride**2 or self.output_dim != self.stride**2:
                raise ShapeError(
                    f"stride {self.stride} needs {self.stride ** 2} sites and output "
                    f"channels, got {n} sites / {self.output_dim} channels"
                )

    @property
    def n_sites(self):
        return len(self.cores)

    @property
    def output_dim(self):
        return self.cores[self.output_site].shape[3]

    def clone(self):
        return MpsModel(
            cores=[c.copy() for c in self.cores],
            output_site=self.output_site,
            local_dim=self.local_dim,
            bond_dim=self.bond_dim,
            stride=self.stride,
            seed=self.seed,
            feature_map=self.feature_map,
        )


def _bond_extents(n, bond_dim, j):
    left = 1 if j == 0 else bond_dim
    right = 1 if j == n - 1 else bond_dim
    return left, right


def init_mps(stride, local_dim, bond_dim, seed, feature_map="sinusoidal"):
    """Seeded near-identity chain for K x K patches.

    Every feature slice of every core starts as an identity matrix (padded or
    truncated to the bond shape) plus Gaussian noise of std 1e-2; the whole
    slice is then scaled by 1/sqrt(local_dim). The scale bounds each site's
    feature-contracted matrix by the identity (the feature vector has unit
    norm, so its component sum is at most sqrt(local_dim)), which keeps chain
    products of hundreds of sites from overflowing and, just as importantly,
    keeps early gradient magnitudes in a range Adam's second-moment estimate
    can recover from. The output core sits mid-chain so its left and right
    environments stay balanced.
    """
    if stride < 1:
        raise DomainError(f"stride must be >= 1, got {stride}")
    if local_dim < 2:
        raise DomainError(f"local_dim must be >= 2, got {local_dim}")
    if bond_dim < 1:
        raise DomainError(f"bond_dim must be >= 1, got {bond_dim}")
    n = stride * stride
    out_dim = stride * stride
    out_site = n // 2
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(local_dim)
    cores = []
    for j in range(n):
        left, right = _bond_extents(n, bond_dim, j)
        eye = np.eye(left, right)
        if j == out_site:
            noise = rng.normal(0.0, INIT_NOISE_STD, size=(local_dim, left, right, out_dim))
            core = scale * (eye[None, :, :, None] + noise)
        else:
            noise = rng.normal(0.0, INIT_NOISE_STD, size=(local_dim, left, right))
            core = scale * (eye[None, :, :] + noise)
        cores.append(core)
    return MpsModel(
        cores=cores,
        output_site=out_site,
        local_dim=local_dim,
        bond_dim=bond_dim,
        stride=stride,
        seed=seed,
        feature_map=feature_map,
    )


@dataclass
class ForwardCache:
    """Per-batch intermediates from one forward pass.

    ``left[j]`` is the product of site matrices 0 .. j-1 (shape B x 1 x bond),
    ``right[i]`` the product of site matrices output_site+1+i .. N-1 (shape
    B x bond x 1); splicing any site matrix between its two environments
    reproduces the logits.
    """

    model: MpsModel
    features: np.ndarray
    site_mats: list = field(repr=False)
    left: list = field(repr=False)
    right: list = field(repr=False)
    logits: np.ndarray = field(repr=False)


def _guard(arr, site):
    amax = np.max(np.abs(arr))
    if not amax <= OVERFLOW_LIMIT:
        raise NumericError(
            f"chain product magnitude exceeded {OVERFLOW_LIMIT:g} at site {site}",
            site=site,
        )


def forward(model, features):
    """Evaluate the chain on a feature batch.

    ``features`` is B x N x d as produced by ``map_patch`` on each of B
    patches. Returns the B x m logit matrix plus the cache ``backward``
    needs. Per-sample arithmetic is independent of the batch split, so
    chunking a batch changes nothing, bit for bit.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3:
        raise ShapeError(f"features must be B x N x d, got ndim {feats.ndim}")
    b, n, d = feats.shape
    if n != model.n_sites or d != model.local_dim:
        raise ShapeError(
            f"features are {n} sites x {d} channels, model wants "
            f"{model.n_sites} x {model.local_dim}"
        )
    o = model.output_site
    mats = [None] * n
    for j in range(n):
        if j != o:
            mats[j] = np.einsum("bd,dlr->blr", feats[:, j], model.cores[j])

    left = [np.ones((b, 1, 1))]
    for j in range(o):
        nxt = left[j] @ mats[j]
        _guard(nxt, j)
        left.append(nxt)

    right = [np.ones((b, 1, 1))]
    for j in range(n - 1, o, -1):
        nxt = mats[j] @ right[-1]
        _guard(nxt, j)
        right.append(nxt)
    right.reverse()  # right[i] now pairs with site o + 1 + i

    lo = left[o][:, 0, :]
    ro = right[0][:, :, 0]
    tmp = np.einsum("bd,dlrm->blrm", feats[:, o], model.cores[o])
    tmp = np.einsum("bl,blrm->brm", lo, tmp)
    logits = np.einsum("br,brm->bm", ro, tmp)
    _guard(logits, o)
    return logits, ForwardCache(model, feats, mats, left, right, logits)


def backward(model, cache, upstream):
    """Gradient of ``sum(upstream * logits)`` with respect to every core.

    ``upstream`` is the B x m loss gradient at the logits. The sweep reuses
    the cached environments: the gradient at site j is the outer product of
    its left environment, its right environment (with the upstream-weighted
    output core folded into whichever side contains it), and the site's
    feature vectors, summed over the batch in index order.
    """
    if cache.model is not model:
        raise StateError("cache was produced by a different model")
    feats = cache.features
    b, n, _ = feats.shape
    o = model.output_site
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != cache.logits.shape:
        raise ShapeError(
            f"upstream gradient shape {up.shape} != logits shape {cache.logits.shape}"
        )
    mats, left, right = cache.site_mats, cache.left, cache.right
    grads = [None] * n

    lo = left[o][:, 0, :]
    ro = right[0][:, :, 0]
    g_feat = np.einsum("bd,bl->bdl", feats[:, o], lo)
    g_out = np.einsum("br,bm->brm", ro, up)
    grads[o] = np.tensordot(g_feat, g_out, axes=([0], [0]))

    # output core contracted with its pixel's features and the upstream weights
    tmp = np.einsum("bd,dlrm->blrm", feats[:, o], model.cores[o])
    s_hat = np.einsum("blrm,bm->blr", tmp, up)

    w = s_hat @ right[0]  # covers sites o..N-1, weighted
    for j in range(o - 1, -1, -1):
        outer = np.einsum("ba,br->bar", left[j][:, 0, :], w[:, :, 0])
        grads[j] = np.einsum("bd,bar->dar", feats[:, j], outer)
        if j > 0:
            w = mats[j] @ w

    v = left[o] @ s_hat  # covers sites 0..o, weighted
    for j in range(o + 1, n):
        outer = np.einsum("ba,br->bar", v[:, 0, :], right[j - o][:, :, 0])
        grads[j] = np.einsum("bd,bar->dar", feats[:, j], outer)
        if j < n - 1:
            v = v @ mats[j]
    return grads


def _capacity_check(n, d):
    if n * math.log2(d) > 20 + 1e-9:
        raise CapacityError(
            f"dense weight tensor with {n} sites at d={d} exceeds 2**20 entries"
        )


def materialize_weight_tensor(model):
    """Contract all bonds into the dense (m, d**N) weight tensor.

    Oracle/test helper only; guarded to d**N <= 2**20. Feature indices are
    flattened row-major with site 0 slowest, matching the global feature map.
    """
    n, d, o = model.n_sites, model.local_dim, model.output_site
    _capacity_check(n, d)
    acc = np.ones((1, 1))
    seen_output = False
    for j, core in enumerate(model.cores):
        if j == o:
            acc = np.einsum("Dl,dlrm->Ddrm", acc, core)
            acc = acc.reshape(-1, core.shape[2], core.shape[3])
            seen_output = True
        elif seen_output:
            acc = np.einsum("Dlm,dlr->Ddrm", acc, core)
            acc = acc.reshape(-1, core.shape[2], acc.shape[-1])
        else:
            acc = np.einsum("Dl,dlr->Ddr", acc, core)
            acc = acc.reshape(-1, core.shape[2])
    theta = acc[:, 0, :].T.copy()
    return DenseTensor(theta.shape, theta.ravel())


def decompose_weight_tensor(
    target, stride, local_dim, bond_dim, output_site=None, feature_map="sinusoidal"
):
    """Sequential-SVD factorization of a dense (m, d**N) weight tensor.

    The output index is folded into the chosen site before the sweep and
    unfolded afterwards. Bond extents are capped at ``bond_dim`` (truncating
    the smallest singular values); whenever ``bond_dim`` reaches the true
    separation rank of the target — at most d**(N/2) mid-chain — the
    factorization is exact and materializing it reproduces the target.
    Cores are zero-padded up to the uniform bond shape.
    """
    if isinstance(target, DenseTensor):
        arr = target.to_array()
    else:
        arr = np.asarray(target, dtype=np.float64)
    n = stride * stride
    m = stride * stride
    d = local_dim
    _capacity_check(n, d)
    if arr.shape != (m, d**n):
        raise ShapeError(f"target must be {(m, d ** n)}, got {arr.shape}")
    o = n // 2 if output_site is None else output_site
    if not 0 <= o < n:
        raise ShapeError(f"output site {o} out of range for {n} sites")

    ten = arr.reshape((m,) + (d,) * n)
    ten = np.moveaxis(ten, 0, o + 1)
    dims = [d] * n
    dims[o] = d * m

    raw_cores = []
    ranks = [1]
    rem = ten.reshape(1, -1)
    for j in range(n - 1):
        rem = rem.reshape(ranks[j] * dims[j], -1)
        u, s, vt = np.linalg.svd(rem, full_matrices=False)
        r = min(bond_dim, s.size)
        raw_cores.append(u[:, :r].reshape(ranks[j], dims[j], r))
        ranks.append(r)
        rem = s[:r, None] * vt[:r]
    raw_cores.append(rem.reshape(ranks[-1], dims[-1], 1))

    cores = []
    for j, raw in enumerate(raw_cores):
        want_l, want_r = _bond_extents(n, bond_dim, j)
        raw = np.pad(raw, ((0, want_l - raw.shape[0]), (0, 0), (0, want_r - raw.shape[2])))
        if j == o:
            core = raw.reshape(want_l, d, m, want_r).transpose(1, 0, 3, 2)
        else:
            core = raw.transpose(1, 0, 2)
        cores.append(core)
    return MpsModel(
        cores=cores,
        output_site=o,
        local_dim=d,
        bond_dim=bond_dim,
        stride=stride,
        feature_map=feature_map,
    )


def parameter_count(model):
    """Number of stored real values: sum over cores of the product of extents."""
    return int(sum(core.size for core in model.cores))


def flatten_cores(cores):
    """Concatenate core arrays into one flat parameter vector."""
    return np.concatenate([np.asarray(c).ravel() for c in cores])


def unflatten_cores(vec, shapes):
    """Split a flat parameter vector back into arrays of the given shapes."""
    vec = np.asarray(vec, dtype=np.float64)
    out = []
    pos = 0
    for shape in shapes:
        size = math.prod(shape)
        out.append(vec[pos : pos + size].reshape(shape).copy())
        pos += size
    if pos != vec.size:
        raise ShapeError(f"vector has {vec.size} entries, shapes need {pos}")
    return out


def save_checkpoint(model, path):
    """Write model metadata plus all cores; round-trips bit-exactly."""
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "strided-tenet-mps",
        "stride": model.stride,
        "local_dim": model.local_dim,
        "bond_dim": model.bond_dim,
        "output_site": model.output_site,
        "n_sites": model.n_sites,
        "seed": model.seed,
        "feature_map": model.feature_map,
    }
    meta_bytes = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    arrays = {"meta_json": meta_bytes}
    for j, core in enumerate(model.cores):
        arrays[f"core_{j:05d}"] = core
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Read a checkpoint written by ``save_checkpoint``.

    Refuses files that are not checkpoints or that declare an unknown format
    version.
    """
    try:
        with np.load(path, allow_pickle=False) as bundle:
            if "meta_json" not in bundle:
                raise FormatError(f"{path}: not a model checkpoint (no metadata)")
            meta = json.loads(bytes(bundle["meta_json"].tobytes()).decode("utf-8"))
            version = meta.get("format_version")
            if version != CHECKPOINT_FORMAT_VERSION:
                raise FormatError(
                    f"{path}: unknown checkpoint format version {version!r} "
                    f"(supported: {CHECKPOINT_FORMAT_VERSION})"
                )
            n = int(meta["n_sites"])
            cores = []
            for j in range(n):
                key = f"core_{j:05d}"
                if key not in bundle:
                    raise FormatError(f"{path}: missing core array {key}")
                cores.append(np.array(bundle[key], dtype=np.float64))
    except FormatError:
        raise
    except (zipfile.BadZipFile, ValueError, KeyError, OSError, io.UnsupportedOperation) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    stride = meta.get("stride")
    return MpsModel(
        cores=cores,
        output_site=int(meta["output_site"]),
        local_dim=int(meta["local_dim"]),
        bond_dim=int(meta["bond_dim"]),
        stride=None if stride is None else int(stride),
        seed=meta.get("seed"),
        feature_map=meta.get("feature_map", "sinusoidal"),
    )
