"""Branch/trunk surrogate of the parameter-to-kernel map.

Dataset generation from the direct solver, full-batch training of four
small branch/trunk network pairs (one per kernel component) with an
adaptive-moment optimizer, inference onto a triangle grid, sup-norm
error reporting, and a little-endian binary weight format.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .kernels import COMPONENTS, KernelSet, TriangleGrid, kernel_residual, solve_kernels
from .markov import splitmix64
from .params import NominalParams, nominal_from_features

MAGIC = b"NOKB"
FORMAT_VERSION = 1


# --------------------------------------------------------------------------
# dataset

@dataclass
class KernelDataset:
    features: np.ndarray        # (n_samples, 6)
    kernels: np.ndarray         # (n_samples, 4, n, n), component order COMPONENTS
    grid: TriangleGrid
    train_idx: np.ndarray
    test_idx: np.ndarray
    parameter_ranges: np.ndarray  # (6, 2)
    family: str
    residual_threshold: float
    redraws: int = 0

    def __post_init__(self):
        if set(self.train_idx) & set(self.test_idx):
            raise ValueError("train/test splits overlap")

    @property
    def n_samples(self) -> int:
        return len(self.features)

    def kernel_set(self, idx: int) -> KernelSet:
        nom = nominal_from_features(self.features[idx], self.family)
        tables = {c: self.kernels[idx, k] for k, c in enumerate(COMPONENTS)}
        return KernelSet(self.grid, tables, nom)

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        for s in range(self.n_samples):
            self.kernel_set(s).write_csv(
                os.path.join(directory, f"sample_{s:04d}.csv"))
        manifest = {
            "family": self.family,
            "grid_n": self.grid.n,
            "residual_threshold": self.residual_threshold,
            "redraws": self.redraws,
            "parameter_ranges": self.parameter_ranges.tolist(),
            "features": self.features.tolist(),
            "train_idx": self.train_idx.tolist(),
            "test_idx": self.test_idx.tolist(),
        }
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1)

    @staticmethod
    def load(directory) -> "KernelDataset":
        with open(os.path.join(directory, "manifest.json")) as fh:
            man = json.load(fh)
        grid = TriangleGrid(man["grid_n"])
        feats = np.asarray(man["features"], dtype=float)
        n = grid.n
        kern = np.zeros((len(feats), 4, n, n))
        for s in range(len(feats)):
            nom = nominal_from_features(feats[s], man["family"])
            ks = KernelSet.read_csv(
                os.path.join(directory, f"sample_{s:04d}.csv"), nom)
            for k, c in enumerate(COMPONENTS):
                kern[s, k] = ks.tables[c]
        return KernelDataset(feats, kern, grid,
                             np.asarray(man["train_idx"], dtype=int),
                             np.asarray(man["test_idx"], dtype=int),
                             np.asarray(man["parameter_ranges"], dtype=float),
                             man["family"], man["residual_threshold"],
                             man["redraws"])


def generate_dataset(ranges, n_samples: int, grid_n: int, seed: int,
                     family: str = "traffic", test_fraction: float = 0.1,
                     residual_threshold: float | None = None) -> KernelDataset:
    """Solve the kernel equations for parameters drawn uniformly from
    per-component ranges; 90/10 split by default."""
    ranges = np.asarray(ranges, dtype=float)
    if ranges.shape != (6, 2):
        raise ValueError("ranges must be (6, 2)")
    if np.any(ranges[:2, :] <= 0.0):
        raise ValueError("speed ranges must be positive")
    grid = TriangleGrid(grid_n)
    if residual_threshold is None:
        residual_threshold = 50.0 * grid.h
    rng = np.random.default_rng(seed)
    feats = np.empty((n_samples, 6))
    kern = np.empty((n_samples, 4, grid_n, grid_n))
    redraws = 0
    for s in range(n_samples):
        while True:
            vec = rng.uniform(ranges[:, 0], ranges[:, 1])
            try:
                nom = nominal_from_features(vec, family)
                ks = solve_kernels(nom, grid_n)
                if kernel_residual(ks).sup_overall > residual_threshold:
                    raise FloatingPointError("residual above threshold")
            except (FloatingPointError, ValueError):
                redraws += 1
                continue
            break
        feats[s] = vec
        for k, c in enumerate(COMPONENTS):
            kern[s, k] = ks.tables[c]
    n_test = max(1, int(round(test_fraction * n_samples)))
    perm = rng.permutation(n_samples)
    return KernelDataset(feats, kern, grid, np.sort(perm[n_test:]),
                         np.sort(perm[:n_test]), ranges, family,
                         residual_threshold, redraws)


# --------------------------------------------------------------------------
# networks

def _init_mlp(sizes, rng) -> list:
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        params.extend([W, b])
    return params


def _mlp_forward(params, X):
    """tanh hidden layers, linear output; returns activations for backprop."""
    acts = [X]
    n_layers = len(params) // 2
    h = X
    for k in range(n_layers):
        W, b = params[2 * k], params[2 * k + 1]
        z = h @ W + b
        h = np.tanh(z) if k < n_layers - 1 else z
        acts.append(h)
    return h, acts

def _mlp_backward(params, acts, grad_out):
    grads = [None] * len(params)
    n_layers = len(params) // 2
    g = grad_out
    for k in reversed(range(n_layers)):
        h_in = acts[k]
        if k < n_layers - 1:
            g = g * (1.0 - acts[k + 1] ** 2)
        grads[2 * k] = h_in.T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ params[2 * k].T
    return grads


class _Adam:
    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1 ** self.t)
            vh = self.v[i] / (1 - self.b2 ** self.t)
            p -= self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class TrainConfig:
    """Hyperparameters for the staged training scheme.

    ``epochs`` is the per-network pretraining budget; ``als_iters``
    alternating exact solves of the two final linear layers follow.
    """

    latent: int = 32
    hidden: tuple = (64, 64)
    lr: float = 3e-3
    epochs: int = 4000
    als_iters: int = 6
    svd_threshold: float = 1e-5
    seed: int = 0
    checkpoint_every: int = 500


def _fit_mlp(params, X, Ytgt, epochs, lr):
    """Full-batch adaptive-moment regression with cosine-decayed step
    size and periodic reweighting toward the worst-fit entries."""
    opt = _Adam(params, lr=lr)
    n = Ytgt.size
    W = np.ones_like(Ytgt)
    for ep in range(epochs):
        frac = ep / max(epochs - 1, 1)
        opt.lr = lr * (0.01 + 0.99 * 0.5 * (1.0 + np.cos(np.pi * frac)))
        out, acts = _mlp_forward(params, X)
        err = out - Ytgt
        loss = float(np.mean(err ** 2))
        if not np.isfinite(loss):
            raise FloatingPointError(f"regression diverged at epoch {ep}")
        if ep >= 500 and ep % 200 == 0:
            W = np.minimum(1.0 + 10.0 * err ** 2 / loss, 300.0)
            W *= n / W.sum()
        opt.step(params, _mlp_backward(params, acts, (2.0 / n) * W * err))


def _hidden_features(params, X):
    h = X
    for k in range(len(params) // 2 - 1):
        h = np.tanh(h @ params[2 * k] + params[2 * k + 1])
    return np.column_stack([h, np.ones(len(h))])


@dataclass
class ComponentNet:
    branch: list      # alternating W, b arrays
    trunk: list
    bias: float
    out_scale: float


class OperatorModel:
    """Four branch/trunk pairs predicting the kernel components.

    Prediction for component c at query points Q given features f:
    out_scale_c * (branch_c(z(f)) . trunk_c(Q) + bias_c) with z the
    per-feature standardization recorded at training time.
    """

    def __init__(self, nets: dict, feat_mean, feat_std, latent: int,
                 family: str = "traffic"):
        self.nets = nets
        self.feat_mean = np.asarray(feat_mean, dtype=float)
        self.feat_std = np.asarray(feat_std, dtype=float)
        self.latent = latent
        self.family = family
        self._trunk_cache: dict = {}

    def _trunk_at(self, c: str, pts: np.ndarray) -> np.ndarray:
        # the trunk basis depends only on the query points, so repeated
        # inference on a fixed grid pays for it once
        key = (c, pts.shape[0], float(pts[0, 0]), float(pts[-1, -1]))
        if key not in self._trunk_cache:
            if len(self._trunk_cache) > 64:
                self._trunk_cache.clear()
            self._trunk_cache[key], _ = _mlp_forward(self.nets[c].trunk, pts)
        return self._trunk_cache[key]

    def predict(self, features, points) -> dict:
        """Kernel values at (x, xi) query points, per component."""
        z = ((np.asarray(features, dtype=float) - self.feat_mean)
             / self.feat_std)[None, :]
        pts = np.asarray(points, dtype=float)
        out = {}
        for c in COMPONENTS:
            net = self.nets[c]
            if net.out_scale == 0.0:
                out[c] = np.zeros(len(pts))
                continue
            b_out, _ = _mlp_forward(net.branch, z)
            t_out = self._trunk_at(c, pts)
            out[c] = net.out_scale * (t_out @ b_out[0] + net.bias)
        return out

    def in_range(self, features, ranges) -> bool:
        f = np.asarray(features, dtype=float)
        r = np.asarray(ranges, dtype=float)
        return bool(np.all(f >= r[:, 0] - 1e-12) and np.all(f <= r[:, 1] + 1e-12))


def train(dataset: KernelDataset, hyper: TrainConfig | None = None) -> tuple:
    """Train the four component nets on the tabulated kernels.

    Three stages per component, all deterministic under the seed:

    1. The train targets are factored by a singular value decomposition;
       modes below ``svd_threshold`` (relative) are discarded.  The
       trunk net is regressed onto the spatial modes (scaled by their
       singular values) and the branch net onto the per-sample
       coefficients.  The two decomposed regressions are far better
       conditioned than the bilinear product loss.
    2. A short alternating sequence of exact least-squares solves of
       the two final linear layers against the product loss; the best
       iterate by train error is kept.
    3. Output scaling by the per-component max-abs of the train split.

    Returns (model, history); history rows are (component, step,
    train_mse, test_mse) of the full prediction in output-normalized
    units, recorded at checkpoints and after each alternating solve.
    """
    hyper = hyper or TrainConfig()
    tr = dataset.train_idx
    te = dataset.test_idx
    if len(tr) == 0:
        raise ValueError("empty train split")
    feats = dataset.features
    mean = feats[tr].mean(axis=0)
    std = feats[tr].std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    Z = (feats - mean) / std
    pts = dataset.grid.nodes()
    tri = np.tril_indices(dataset.grid.n)

    rng = np.random.default_rng(hyper.seed)
    nets = {}
    history = []
    p = hyper.latent
    for k, c in enumerate(COMPONENTS):
        Y = dataset.kernels[:, k][:, tri[0], tri[1]]  # (n_samples, n_nodes)
        scale = float(np.abs(Y[tr]).max())
        branch = _init_mlp((6, *hyper.hidden, p), rng)
        trunk = _init_mlp((2, *hyper.hidden, p), rng)
        if scale == 0.0:
            # identically-zero target (e.g. sigma+ = 0 kills Kuu, Kuv):
            # a zero output scale makes the prediction exactly zero
            nets[c] = ComponentNet(branch, trunk, 0.0, 0.0)
            history.append((c, 0, 0.0, 0.0))
            continue
        Yn = Y / scale
        Ztr, Ytr = Z[tr], Yn[tr]
        n_nodes = Ytr.shape[1]

        # -- stage 1: decomposed regressions onto the factored targets
        U, S, Vt = np.linalg.svd(Ytr, full_matrices=False)
        s1 = S[0]
        pe = max(1, min(p, int(np.sum(S / s1 > hyper.svd_threshold))))
        coef = np.zeros((len(tr), p))
        basis = np.zeros((p, n_nodes))
        coef[:, :pe] = U[:, :pe] * (s1 / np.sqrt(n_nodes))
        basis[:pe] = (S[:pe, None] / s1) * Vt[:pe] * np.sqrt(n_nodes)
        _fit_mlp(trunk, pts, basis.T, hyper.epochs, hyper.lr)
        _fit_mlp(branch, Ztr, coef, hyper.epochs, hyper.lr)

        def product_mses(branch_, trunk_):
            T, _ = _mlp_forward(trunk_, pts)
            B, _ = _mlp_forward(branch_, Ztr)
            train_mse = float(np.mean((B @ T.T - Ytr) ** 2))
            if len(te):
                Bt, _ = _mlp_forward(branch_, Z[te])
                test_mse = float(np.mean((Bt @ T.T - Yn[te]) ** 2))
            else:
                test_mse = float("nan")
            return train_mse, test_mse

        history.append((c, hyper.epochs, *product_mses(branch, trunk)))

        # -- stage 2: alternating exact solves of the final layers ----
        Hb = _hidden_features(branch, Ztr)
        Ht = _hidden_features(trunk, pts)
        Wb = np.vstack([branch[-2], branch[-1]])
        Wt = np.vstack([trunk[-2], trunk[-1]])
        eps = 1e-9
        best = (np.inf, Wb, Wt)
        Ab = Hb.T @ Hb
        Ab += eps * np.trace(Ab) / Ab.shape[0] * np.eye(Ab.shape[0])
        At = Ht.T @ Ht
        At += eps * np.trace(At) / At.shape[0] * np.eye(At.shape[0])
        for it in range(hyper.als_iters):
            T = Ht @ Wt
            G = T.T @ T
            G += eps * np.trace(G) / p * np.eye(p)
            Wb = np.linalg.solve(Ab, Hb.T @ Ytr @ T) @ np.linalg.inv(G)
            B = Hb @ Wb
            G2 = B.T @ B
            G2 += eps * np.trace(G2) / p * np.eye(p)
            Wt = np.linalg.solve(At, Ht.T @ Ytr.T @ B) @ np.linalg.inv(G2)
            err = B @ (Ht @ Wt).T - Ytr
            train_mse = float(np.mean(err ** 2))
            if not np.isfinite(train_mse):
                raise FloatingPointError(
                    f"training diverged for component {c} at solve {it}")
            if train_mse < best[0]:
                best = (train_mse, Wb.copy(), Wt.copy())
            branch[-2], branch[-1] = Wb[:-1], Wb[-1]
            trunk[-2], trunk[-1] = Wt[:-1], Wt[-1]
            history.append((c, hyper.epochs + 1 + it,
                            *product_mses(branch, trunk)))
        _, Wb, Wt = best
        branch[-2], branch[-1] = Wb[:-1], Wb[-1]
        trunk[-2], trunk[-1] = Wt[:-1], Wt[-1]
        history.append((c, hyper.epochs + 1 + hyper.als_iters,
                        *product_mses(branch, trunk)))
        nets[c] = ComponentNet(branch, trunk, 0.0, scale)
    model = OperatorModel(nets, mean, std, p, dataset.family)
    return model, history


def infer(model: OperatorModel, delta0, grid: TriangleGrid,
          ranges=None) -> KernelSet:
    """Tabulate the surrogate kernels on a triangle grid.

    Inference wall-clock and an extrapolation flag are recorded in the
    returned set's ``info``.
    """
    delta0 = np.asarray(delta0, dtype=float)
    t0 = time.perf_counter()
    pts = grid.nodes()
    pred = model.predict(delta0, pts)
    elapsed = time.perf_counter() - t0
    n = grid.n
    tri = np.tril_indices(n)
    tables = {}
    for c in COMPONENTS:
        tab = np.zeros((n, n))
        tab[tri] = pred[c]
        tables[c] = tab
    nom = nominal_from_features(delta0, model.family)
    info = {"inference_seconds": elapsed}
    if ranges is not None:
        info["extrapolation"] = not model.in_range(delta0, ranges)
    return KernelSet(grid, tables, nom, info=info)


@dataclass
class SupErrorReport:
    """Componentwise worst-case and mean deviation over a dataset split."""

    components: tuple
    max_abs: np.ndarray
    mean_abs: np.ndarray
    max_abs_normalized: np.ndarray
    n_samples: int

    def __post_init__(self):
        if np.any(self.max_abs < self.mean_abs - 1e-15):
            raise ValueError("sup must dominate mean")

    @property
    def epsilon(self) -> float:
        return float(self.max_abs.max())

    def lines(self):
        yield "component max_abs_error mean_abs_error max_abs_normalized"
        for k, c in enumerate(self.components):
            yield (f"K{c} {self.max_abs[k]:.4e} {self.mean_abs[k]:.4e} "
                   f"{self.max_abs_normalized[k]:.4e}")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["component", "max_abs_error", "mean_abs_error",
                        "max_abs_normalized"])
            for k, c in enumerate(self.components):
                w.writerow([f"K{c}", f"{self.max_abs[k]:.17g}",
                            f"{self.mean_abs[k]:.17g}",
                            f"{self.max_abs_normalized[k]:.17g}"])


def sup_error(model: OperatorModel, dataset: KernelDataset,
              split: str = "test") -> SupErrorReport:
    idx = {"test": dataset.test_idx, "train": dataset.train_idx}[split]
    if len(idx) == 0:
        raise ValueError(f"empty split {split!r}")
    pts = dataset.grid.nodes()
    tri = np.tril_indices(dataset.grid.n)
    max_abs = np.zeros(4)
    mean_abs = np.zeros(4)
    max_norm = np.zeros(4)
    for s in idx:
        pred = model.predict(dataset.features[s], pts)
        for k, c in enumerate(COMPONENTS):
            err = np.abs(pred[c] - dataset.kernels[s, k][tri])
            max_abs[k] = max(max_abs[k], err.max())
            mean_abs[k] += err.mean() / len(idx)
            max_norm[k] = max(max_norm[k],
                              err.max() / (model.nets[c].out_scale or 1.0))
    return SupErrorReport(COMPONENTS, max_abs, mean_abs, max_norm, len(idx))


# --------------------------------------------------------------------------
# persistence

def _pack_mlp(params) -> bytes:
    chunks = [struct.pack("<I", len(params) // 2)]
    for k in range(len(params) // 2):
        W, b = params[2 * k], params[2 * k + 1]
        chunks.append(struct.pack("<II", W.shape[0], W.shape[1]))
        chunks.append(W.astype("<f8").tobytes(order="C"))
        chunks.append(b.astype("<f8").tobytes(order="C"))
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated model file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").reshape(shape).copy()


def _unpack_mlp(r: _Reader) -> list:
    params = []
    for _ in range(r.u32()):
        fan_in, fan_out = r.u32(), r.u32()
        params.append(r.array((fan_in, fan_out)))
        params.append(r.array((fan_out,)))
    return params


_FAMILIES = ("constant", "traffic")


def save_model(model: OperatorModel, path):
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION),
              struct.pack("<I", model.latent),
              struct.pack("<I", _FAMILIES.index(model.family)),
              struct.pack("<I", len(model.feat_mean)),
              model.feat_mean.astype("<f8").tobytes(),
              model.feat_std.astype("<f8").tobytes()]
    for c in COMPONENTS:
        net = model.nets[c]
        chunks.append(struct.pack("<dd", net.out_scale, net.bias))
        chunks.append(_pack_mlp(net.branch))
        chunks.append(_pack_mlp(net.trunk))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_model(path) -> OperatorModel:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ValueError("not a model file (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    latent = r.u32()
    family = _FAMILIES[r.u32()]
    n_feat = r.u32()
    feat_mean = r.array((n_feat,))
    feat_std = r.array((n_feat,))
    nets = {}
    for c in COMPONENTS:
        out_scale = r.f64()
        bias = r.f64()
        branch = _unpack_mlp(r)
        trunk = _unpack_mlp(r)
        nets[c] = ComponentNet(branch, trunk, bias, out_scale)
    if r.pos != len(data):
        raise ValueError("trailing bytes in model file")
    return OperatorModel(nets, feat_mean, feat_std, latent, family)
