"""Feed-forward network engine: forward, backprop, Adam, composition.

Deliberately small: dense/conv2d/maxpool2d/dropout/flatten/reshape layers,
batch-first arrays, float32 for training with float64 available for
gradient-check tests. Conv and pool data movement is delegated to the
selected kernel backend; GEMMs go through numpy/BLAS.

Spatial activations are carried channels-last (n, h, w, c) internally, so
the im2col GEMM writes conv outputs directly in layout and conv/pool/conv
chains run transpose-free. Logical tensor semantics (and the parameter
arrays, stored (filters, c, k, k)) are channels-first; the reshape layer
converts on entry. Flatten emits channels-last element order, which only
ever feeds dense layers and is consistent across save/load.
"""

from __future__ import annotations

import threading

import numpy as np

from .. import _kernels
from . import losses
from .spec import ArchitectureSpec, SpecError


class EngineError(RuntimeError):
    """Numerical failure inside a training step (non-finite values)."""


class _Workspace(threading.local):
    """Per-thread reusable scratch arrays.

    Fresh multi-MB allocations are page-fault bound on small hosts, so the
    hot path recycles buffers. A buffer's lifetime never exceeds one
    forward/backward pass of its owning model (outputs that escape a call
    are always freshly allocated), and buffers are thread-local, so
    concurrent forwards on shared parameters stay safe.
    """

    def __init__(self):
        self.bufs = {}

    def get(self, key, shape, dtype):
        k = (key, shape, np.dtype(dtype).str)
        arr = self.bufs.get(k)
        if arr is None:
            arr = np.empty(shape, dtype=dtype)
            self.bufs[k] = arr
        return arr


def _conv_padding(layer):
    """(pad_before, pad_after) for a conv layer; 'same' keeps h, w."""
    if layer.padding == "same":
        total = layer.kernel - 1
        return total // 2, total - total // 2
    return 0, 0


def _nhwc(x):
    """Logical (n, c, h, w) batch -> internal channels-last layout."""
    n, c, h, w = x.shape
    if c == 1:
        return x.reshape(n, h, w, 1)
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _from_nhwc(x):
    """Internal channels-last batch -> logical (n, c, h, w)."""
    n, h, w, c = x.shape
    if c == 1:
        return x.reshape(n, 1, h, w)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Model:
    """An ArchitectureSpec bound to parameter arrays.

    Parameters live in `params`: one (weights, biases) pair per
    parameterized layer, None elsewhere. Construction with a seed draws
    Glorot-uniform weights and zero biases deterministically.
    """

    def __init__(self, spec: ArchitectureSpec, seed=0, dtype=np.float32, params=None):
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._ws = _Workspace()
        if params is not None:
            self.params = params
            self._check_params()
        else:
            rng = np.random.default_rng(seed)
            self.params = []
            for layer, pshape in zip(spec.layers, spec.param_shapes()):
                if pshape is None:
                    self.params.append(None)
                    continue
                wshape, bshape = pshape
                if layer.kind == "dense":
                    fan_in, fan_out = wshape
                else:  # conv2d: (f, c, k, k)
                    fan_in = wshape[1] * wshape[2] * wshape[3]
                    fan_out = wshape[0] * wshape[2] * wshape[3]
                w = glorot_uniform(rng, wshape, fan_in, fan_out, self.dtype)
                b = np.zeros(bshape, dtype=self.dtype)
                self.params.append((w, b))

    def _check_params(self):
        expected = self.spec.param_shapes()
        if len(self.params) != len(expected):
            raise SpecError("parameter list length does not match architecture")
        for i, (got, want) in enumerate(zip(self.params, expected)):
            if (got is None) != (want is None):
                raise SpecError(f"layer {i}: parameter presence mismatch")
            if want is not None:
                w, b = got
                if w.shape != want[0] or b.shape != want[1]:
                    raise SpecError(
                        f"layer {i}: parameter shapes {w.shape}/{b.shape} "
                        f"do not match spec {want[0]}/{want[1]}")

    # ------------------------------------------------------------------
    # forward / backward

    def forward(self, x, mode="infer", rng=None):
        """Run the network on a batch; `mode` controls dropout."""
        out, _ = self._run(x, mode, rng, want_cache=False)
        return out

    def _run(self, x, mode, rng, want_cache):
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be train or infer, got {mode!r}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        n = x.shape[0]
        if x.reshape(n, -1).shape[1] != self.spec.input_dim:
            raise SpecError(
                f"input: batch shape {x.shape[1:]} does not match "
                f"architecture input ({self.spec.input_dim},)")
        x = x.reshape(n, self.spec.input_dim)
        if mode == "train" and self.spec.has_dropout and rng is None:
            raise ValueError("train-mode forward through dropout needs an rng")
        caches = [] if want_cache else None
        for i, layer in enumerate(self.spec.layers):
            x, cache = self._layer_forward(i, layer, x, mode, rng, want_cache)
            if want_cache:
                caches.append(cache)
        return x, caches

    def _layer_forward(self, i, layer, x, mode, rng, want_cache=True):
        kind = layer.kind
        if kind == "dense":
            w, b = self.params[i]
            if x.shape[1] != w.shape[0]:
                raise SpecError(f"layer {i} (dense): input width {x.shape[1]} "
                                f"!= weight rows {w.shape[0]}")
            z = x @ w
            z += b
            a = _activation(layer.activation, z)
            return a, (x, a)
        if kind == "conv2d":
            w, b = self.params[i]
            pb, pa = _conv_padding(layer)
            n, h, w_in, c = x.shape
            k = layer.kernel
            f = w.shape[0]
            oh = h + pb + pa - k + 1
            ow = w_in + pb + pa - k + 1
            cols = _kernels.im2col(
                x, k, pb, pa,
                out=self._ws.get((i, "cols"), (n * oh * ow, k * k * c), x.dtype))
            # (f, c, k, k) -> (k*k*c, f), matching im2col column order
            wmat = np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(-1, f))
            z2d = np.matmul(cols, wmat,
                            out=self._ws.get((i, "z"), (n * oh * ow, f), x.dtype))
            z2d += b
            z = z2d.reshape(n, oh, ow, f)
            a = _activation(layer.activation, z)
            return a, (x.shape, cols, wmat, a)
        if kind == "maxpool2d":
            n, h, w_in, c = x.shape
            oh, ow = h // layer.window, w_in // layer.window
            out, idx = _kernels.maxpool_forward(
                x, layer.window,
                out=self._ws.get((i, "pool"), (n, oh, ow, c), x.dtype),
                idx=(self._ws.get((i, "poolidx"), (n, oh, ow, c), np.int8)
                     if want_cache else None),
                want_idx=want_cache)
            return out, (x.shape, idx)
        if kind == "dropout":
            if mode == "train" and layer.rate > 0.0:
                keep = 1.0 - layer.rate
                rand = self._ws.get((i, "rand"), x.shape, np.float32)
                rng.random(out=rand, dtype=np.float32)
                bits = self._ws.get((i, "maskbits"), x.shape, np.bool_)
                np.less(rand, keep, out=bits)
                mask = self._ws.get((i, "mask"), x.shape, x.dtype)
                np.copyto(mask, bits)
                mask /= keep  # inverted dropout: infer mode is the identity
                out = np.multiply(x, mask, out=self._ws.get((i, "drop"), x.shape, x.dtype))
                return out, mask
            return x, None
        if kind == "flatten":
            return x.reshape(x.shape[0], -1), x.shape
        if kind == "reshape":
            n = x.shape[0]
            inshape = self.spec.layer_shapes[i][0]
            logical = _from_nhwc(x) if len(inshape) == 3 else x
            logical = logical.reshape((n,) + layer.shape)
            return (_nhwc(logical) if len(layer.shape) == 3 else logical), None
        raise SpecError(f"layer {i}: unhandled kind {kind}")  # unreachable

    def _backward(self, caches, dout, want_param_grads=True):
        """Backprop an output gradient; returns (per-layer grads, dinput)."""
        grads = [None] * len(self.spec.layers)
        for i in range(len(self.spec.layers) - 1, -1, -1):
            layer = self.spec.layers[i]
            dout, g = self._layer_backward(i, layer, caches[i], dout, want_param_grads)
            grads[i] = g
        return grads, dout

    def _layer_backward(self, i, layer, cache, dout, want_param_grads):
        kind = layer.kind
        if kind == "dense":
            x, a = cache
            dz = _activation_backward(layer.activation, a, dout)
            dw = x.T @ dz if want_param_grads else None
            db = dz.sum(axis=0) if want_param_grads else None
            dx = dz @ self.params[i][0].T
            return dx, ((dw, db) if want_param_grads else None)
        if kind == "conv2d":
            x_shape, cols, wmat, a = cache
            w, _ = self.params[i]
            f = w.shape[0]
            k = layer.kernel
            # dout buffers are dead after this layer consumes them, so the
            # activation derivative is applied in place
            dz = _activation_backward_inplace(layer.activation, a, dout,
                                              self._ws, (i, "actbwd"))
            dz2d = dz.reshape(-1, f)
            pb, pa = _conv_padding(layer)
            if want_param_grads:
                dw = np.ascontiguousarray(
                    (cols.T @ dz2d).reshape(k, k, -1, f).transpose(3, 2, 0, 1))
                db = dz2d.sum(axis=0)
            dcols = np.matmul(dz2d, wmat.T,
                              out=self._ws.get((i, "dcols"), cols.shape, cols.dtype))
            dx = _kernels.col2im(dcols, x_shape, k, pb, pa,
                                 out=self._ws.get((i, "dx"), x_shape, dout.dtype))
            return dx, ((dw, db) if want_param_grads else None)
        if kind == "maxpool2d":
            x_shape, idx = cache
            dx = _kernels.maxpool_backward(
                dout, idx, x_shape, layer.window,
                out=self._ws.get((i, "pooldx"), x_shape, dout.dtype))
            return dx, None
        if kind == "dropout":
            return (dout if cache is None else dout * cache), None
        if kind == "flatten":
            return dout.reshape(cache), None
        if kind == "reshape":
            n = dout.shape[0]
            inshape = self.spec.layer_shapes[i][0]
            logical = _from_nhwc(dout) if len(layer.shape) == 3 else dout
            logical = logical.reshape((n,) + inshape)
            return (_nhwc(logical) if len(inshape) == 3 else logical), None
        raise SpecError(f"layer {i}: unhandled kind {kind}")  # unreachable

    # ------------------------------------------------------------------
    # training

    def loss_and_grads(self, parts, rng=None, mode="train"):
        """Loss and parameter gradients for a weighted sum of cross-entropy
        terms: parts is a list of (x, y, weight)."""
        xs = [np.asarray(p[0], dtype=self.dtype).reshape(len(p[0]), -1) for p in parts]
        counts = [len(x) for x in xs]
        batch = np.concatenate(xs, axis=0) if len(xs) > 1 else xs[0]
        out, caches = self._run(batch, mode, rng, want_cache=True)
        loss = 0.0
        dout = np.empty_like(out)
        r0 = 0
        for (x, y, wgt), cnt in zip(parts, counts):
            rows = slice(r0, r0 + cnt)
            y = np.asarray(y, dtype=self.dtype)
            loss += wgt * losses.cross_entropy(y, out[rows])
            dout[rows] = wgt * losses.cross_entropy_grad(y, out[rows])
            r0 += cnt
        grads, _ = self._backward(caches, dout)
        return loss, grads

    def train_step(self, x, y, adam, rng=None):
        """One Adam step on mean cross-entropy; returns the pre-update loss."""
        return self.train_step_weighted([(x, y, 1.0)], adam, rng)

    def train_step_weighted(self, parts, adam, rng=None):
        """One Adam step on sum_j w_j * cross_entropy(y_j, f(x_j));
        returns the pre-update loss."""
        loss, grads = self.loss_and_grads(parts, rng)
        if not np.isfinite(loss):
            raise EngineError(f"non-finite loss {loss!r}")
        self._check_finite(grads)
        adam.apply(self.params, grads)
        return loss

    def _check_finite(self, grads):
        for i, g in enumerate(grads):
            if g is None:
                continue
            if not (np.isfinite(g[0]).all() and np.isfinite(g[1]).all()):
                raise EngineError(
                    f"non-finite gradient at layer {i} "
                    f"({self.spec.layers[i].kind}); step aborted")

    # ------------------------------------------------------------------
    # per-example clipped gradients (noisy-SGD trainer support)

    def clipped_grad_sum(self, x, y, clip_norm, rng=None, mode="train"):
        """Sum over the batch of per-example gradients, each L2-clipped to
        clip_norm. Returns (grads_sum, per_example_norms).

        The sum is evaluated as one GEMM per layer with per-row scaling, so
        with all clip factors at 1.0 it is bitwise identical to an unclipped
        batch gradient computed the same way.
        """
        x = np.asarray(x, dtype=self.dtype).reshape(len(x), -1)
        y = np.asarray(y, dtype=self.dtype)
        out, caches = self._run(x, mode, rng, want_cache=True)
        dout = losses.cross_entropy_grad_rows(y, out)  # no batch mean

        # backward pass collecting per-layer (inputs, deltas); the gradient
        # flow between layers is per-example independent, so deltas can be
        # scaled per example afterwards
        n = len(x)
        deferred = {}  # layer index -> tensors for the deferred GEMM
        sq_norms = np.zeros(n, dtype=np.float64)
        d = dout
        for i in range(len(self.spec.layers) - 1, -1, -1):
            layer = self.spec.layers[i]
            if layer.kind == "dense":
                xin, a = caches[i]
                dz = _activation_backward(layer.activation, a, d)
                dz_sq = (dz.astype(np.float64) ** 2).sum(axis=1)
                sq_norms += (xin.astype(np.float64) ** 2).sum(axis=1) * dz_sq + dz_sq
                deferred[i] = ("dense", xin, dz)
                d = dz @ self.params[i][0].T
            elif layer.kind == "conv2d":
                x_shape, cols, wmat, a = caches[i]
                w, _ = self.params[i]
                f = w.shape[0]
                k = layer.kernel
                dz = _activation_backward(layer.activation, a, d)
                positions = dz.shape[1] * dz.shape[2]
                dz2d = dz.reshape(-1, f)
                cols3 = cols.reshape(n, positions, -1)
                dz3 = dz2d.reshape(n, positions, f)
                per_w = np.matmul(cols3.transpose(0, 2, 1).astype(np.float64),
                                  dz3.astype(np.float64))
                per_b = dz3.astype(np.float64).sum(axis=1)
                sq_norms += (per_w ** 2).sum(axis=(1, 2)) + (per_b ** 2).sum(axis=1)
                deferred[i] = ("conv2d", cols, dz2d, positions, k, w.shape)
                pb, pa = _conv_padding(layer)
                dcols = dz2d @ wmat.T
                d = _kernels.col2im(dcols, x_shape, k, pb, pa)
            else:
                d, _ = self._layer_backward(i, layer, caches[i], d, False)

        norms = np.sqrt(sq_norms)
        factors = np.ones(n, dtype=self.dtype)
        over = norms > clip_norm
        factors[over] = (clip_norm / norms[over]).astype(self.dtype)

        grads = [None] * len(self.spec.layers)
        for i, item in deferred.items():
            if item[0] == "dense":
                _, xin, dz = item
                dzs = dz * factors[:, None]
                grads[i] = (xin.T @ dzs, dzs.sum(axis=0))
            else:
                _, cols, dz2d, positions, k, wshape = item
                row_factors = np.repeat(factors, positions)[:, None]
                dzs = dz2d * row_factors
                dw = np.ascontiguousarray(
                    (cols.T @ dzs).reshape(k, k, -1, wshape[0]).transpose(3, 2, 0, 1))
                grads[i] = (dw, dzs.sum(axis=0))
        return grads, norms

    # ------------------------------------------------------------------
    # snapshots

    def copy_params(self):
        return [None if p is None else (p[0].copy(), p[1].copy()) for p in self.params]

    def clone(self):
        return Model(self.spec, seed=self.seed, dtype=self.dtype, params=self.copy_params())

    def set_params(self, params):
        self.params = [None if p is None else (p[0].copy(), p[1].copy()) for p in params]
        self._check_params()

    def astype(self, dtype):
        cast = [None if p is None else (p[0].astype(dtype), p[1].astype(dtype))
                for p in self.params]
        return Model(self.spec, seed=self.seed, dtype=dtype, params=cast)

    def num_params(self):
        return sum(p[0].size + p[1].size for p in self.params if p is not None)


def _activation(name, z):
    # relu/tanh run in place: z is always freshly allocated by the caller
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0, out=z)
    if name == "tanh":
        return np.tanh(z, out=z)
    if name == "softmax":
        z = z - z.max(axis=1, keepdims=True)
        np.exp(z, out=z)
        z /= z.sum(axis=1, keepdims=True)
        return z
    raise SpecError(f"unhandled activation {name}")  # unreachable


def _activation_backward(name, a, dout):
    if name == "identity":
        return dout
    if name == "relu":
        return dout * (a > 0)
    if name == "tanh":
        return dout * (1.0 - a * a)
    if name == "softmax":
        dot = (dout * a).sum(axis=1, keepdims=True)
        return a * (dout - dot)
    raise SpecError(f"unhandled activation {name}")  # unreachable


def _activation_backward_inplace(name, a, dout, ws, key):
    """In-place variant for the conv hot path; may overwrite dout."""
    if name == "identity":
        return dout
    if name == "relu":
        bits = ws.get(key, a.shape, np.bool_)
        np.greater(a, 0, out=bits)
        return np.multiply(dout, bits, out=dout)
    if name == "tanh":
        t = ws.get(key, a.shape, a.dtype)
        np.multiply(a, a, out=t)
        np.subtract(1.0, t, out=t)
        return np.multiply(dout, t, out=dout)
    raise SpecError(f"conv activation {name} has no in-place backward")


class AdamState:
    """Adam optimizer state congruent with a model's parameter list."""

    def __init__(self, model, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [None if p is None else (np.zeros_like(p[0]), np.zeros_like(p[1]))
                  for p in model.params]
        self.v = [None if p is None else (np.zeros_like(p[0]), np.zeros_like(p[1]))
                  for p in model.params]
        self._scratch = [None if p is None else (np.empty_like(p[0]), np.empty_like(p[1]),
                                                 np.empty_like(p[0]), np.empty_like(p[1]))
                         for p in model.params]

    def apply(self, params, grads):
        """One bias-corrected Adam update, in place."""
        if len(params) != len(self.m):
            raise ValueError("Adam state is not congruent with these parameters")
        self.step += 1
        bc1 = 1.0 - self.beta1 ** self.step
        bc2 = 1.0 - self.beta2 ** self.step
        for p, g, m, v, s in zip(params, grads, self.m, self.v, self._scratch):
            if p is None:
                continue
            for arr, garr, marr, varr, num, den in (
                    (p[0], g[0], m[0], v[0], s[0], s[2]),
                    (p[1], g[1], m[1], v[1], s[1], s[3])):
                marr *= self.beta1
                marr += (1.0 - self.beta1) * garr
                varr *= self.beta2
                np.multiply(garr, garr, out=num)
                num *= (1.0 - self.beta2)
                varr += num
                # update = lr * (m / bc1) / (sqrt(v / bc2) + eps)
                np.divide(varr, bc2, out=den)
                np.sqrt(den, out=den)
                den += self.eps
                np.divide(marr, bc1, out=num)
                num /= den
                num *= self.lr
                arr -= num


class CombinedModel:
    """Generator feeding a frozen surrogate.

    Training updates only the generator; the surrogate always runs in infer
    mode (dropout off) and its parameters are never written.
    """

    def __init__(self, generator: Model, surrogate: Model):
        if generator.spec.output_dim != surrogate.spec.input_dim:
            raise SpecError(
                f"generator output {generator.spec.output_dim} != "
                f"surrogate input {surrogate.spec.input_dim}")
        self.generator = generator
        self.surrogate = surrogate

    def forward(self, z, mode="infer", rng=None):
        mid = self.generator.forward(z, mode, rng)
        return self.surrogate.forward(mid, "infer")

    def train_step(self, z, y, adam_g, rng=None):
        """One Adam step on the generator toward surrogate output y;
        returns the pre-update cross-entropy."""
        z = np.asarray(z, dtype=self.generator.dtype)
        y = np.asarray(y, dtype=self.generator.dtype)
        mid, cache_g = self.generator._run(z, "train", rng, want_cache=True)
        out, cache_s = self.surrogate._run(mid, "infer", None, want_cache=True)
        loss = losses.cross_entropy(y, out)
        if not np.isfinite(loss):
            raise EngineError(f"non-finite combined loss {loss!r}")
        dout = losses.cross_entropy_grad(y, out)
        _, dmid = self.surrogate._backward(cache_s, dout, want_param_grads=False)
        grads_g, _ = self.generator._backward(cache_g, dmid.reshape(mid.shape))
        self.generator._check_finite(grads_g)
        adam_g.apply(self.generator.params, grads_g)
        return loss
