"""Dense-tensor numeric kernels with hand-derived backward passes.

Every layer exposes::

    forward(x) -> (y, cache)
    backward(dy, cache) -> (dx, grads)

where ``grads`` maps the layer's parameter names to arrays of matching
shape.  Caches are returned rather than stored so forward/backward pairs
are reentrant; parameters live in ``layer.p`` and are updated in place
by the optimizer.  Layers compute in the dtype of their parameters:
float32 for training, float64 for gradient checking (see ``cast``).

Shapes follow the convention (batch, sequence, channels); recurrent
layers run along the sequence axis and return the full hidden sequence.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape,
                   dtype=np.float32) -> np.ndarray:
    """Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def sigmoid(x):
    # evaluated on the appropriate half-line so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _require_finite(name, x):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name}: non-finite values in input")


class Layer:
    """Common parameter plumbing; subclasses implement forward/backward."""

    def __init__(self):
        self.p: dict[str, np.ndarray] = {}

    def params(self) -> dict[str, np.ndarray]:
        return self.p

    def cast(self, dtype) -> "Layer":
        for k in self.p:
            self.p[k] = self.p[k].astype(dtype)
        return self


class Conv1d(Layer):
    """Same-padded 1-D convolution over the sequence axis, stride 1.

    x: (B, L, C_in) -> y: (B, L, C_out), y = relu(x * w + b) when relu
    is on.  The kernel is stored (k, C_in, C_out) so the forward pass is
    a single matmul on unrolled windows.
    """

    def __init__(self, kernel_size: int, in_channels: int, out_channels: int,
                 rng: np.random.Generator, relu: bool = True):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
        self.k = kernel_size
        self.cin = in_channels
        self.cout = out_channels
        self.relu = relu
        fan_in = kernel_size * in_channels
        fan_out = kernel_size * out_channels
        self.p = {
            "w": glorot_uniform(rng, fan_in, fan_out, (kernel_size, in_channels, out_channels)),
            "b": np.zeros(out_channels, dtype=np.float32),
        }

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.cin:
            raise ShapeMismatchError(f"conv1d expects (B, L, {self.cin}), got {x.shape}")
        _require_finite("conv1d", x)
        B, L, _ = x.shape
        k = self.k
        left = k // 2
        xp = np.zeros((B, L + k - 1, self.cin), dtype=x.dtype)
        xp[:, left : left + L] = x
        # cols[b, t, j, c] = xp[b, t + j, c]
        cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)
        cols = np.ascontiguousarray(cols.transpose(0, 1, 3, 2)).reshape(B * L, k * self.cin)
        w2 = self.p["w"].reshape(k * self.cin, self.cout)
        pre = cols @ w2 + self.p["b"]
        if self.relu:
            y = np.maximum(pre, 0.0)
            mask = pre > 0.0
        else:
            y = pre
            mask = None
        return y.reshape(B, L, self.cout), (cols, mask, B, L)

    def backward(self, dy, cache):
        cols, mask, B, L = cache
        k = self.k
        dpre = dy.reshape(B * L, self.cout)
        if self.relu:
            dpre = dpre * mask
        w2 = self.p["w"].reshape(k * self.cin, self.cout)
        grads = {
            "w": (cols.T @ dpre).reshape(k, self.cin, self.cout),
            "b": dpre.sum(axis=0),
        }
        dcols = (dpre @ w2.T).reshape(B, L, k, self.cin)
        dxp = np.zeros((B, L + k - 1, self.cin), dtype=dy.dtype)
        for j in range(k):
            dxp[:, j : j + L] += dcols[:, :, j]
        left = k // 2
        return dxp[:, left : left + L], grads


class Dense(Layer):
    """y = act(x @ w + b), activation in {relu, sigmoid, none}."""

    def __init__(self, in_dim: int, out_dim: int, activation,
                 rng: np.random.Generator):
        super().__init__()
        if activation not in ("relu", "sigmoid", None):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.din = in_dim
        self.p = {
            "w": glorot_uniform(rng, in_dim, out_dim, (in_dim, out_dim)),
            "b": np.zeros(out_dim, dtype=np.float32),
        }

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.din:
            raise ShapeMismatchError(f"dense expects (B, {self.din}), got {x.shape}")
        _require_finite("dense", x)
        pre = x @ self.p["w"] + self.p["b"]
        if self.activation == "relu":
            y = np.maximum(pre, 0.0)
            aux = pre > 0.0
        elif self.activation == "sigmoid":
            y = sigmoid(pre)
            aux = y
        else:
            y = pre
            aux = None
        return y, (x, aux)

    def backward(self, dy, cache):
        x, aux = cache
        if self.activation == "relu":
            dpre = dy * aux
        elif self.activation == "sigmoid":
            dpre = dy * aux * (1.0 - aux)  # sigma' = sigma (1 - sigma)
        else:
            dpre = dy
        grads = {"w": x.T @ dpre, "b": dpre.sum(axis=0)}
        return dpre @ self.p["w"].T, grads


class GRU(Layer):
    """Gated recurrent unit, zero initial state, full sequence output.

    Gate order along the 3H axis is [z | r | n]::

        z_t = sigmoid(x_t Wx_z + h_{t-1} Wh_z + b_z)
        r_t = sigmoid(x_t Wx_r + h_{t-1} Wh_r + b_r)
        n_t = tanh(x_t Wx_n + (r_t * h_{t-1}) Wh_n + b_n)
        h_t = (1 - z_t) * n_t + z_t * h_{t-1}

    With everything zero, z = 0.5 and n = tanh(0) = 0, so h stays 0; and
    |h| < 1 always since h is a convex mix of a tanh and the previous h.
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.din = in_dim
        self.h = hidden
        wx = np.concatenate(
            [glorot_uniform(rng, in_dim, hidden, (in_dim, hidden)) for _ in range(3)],
            axis=1,
        )
        wh = np.concatenate(
            [glorot_uniform(rng, hidden, hidden, (hidden, hidden)) for _ in range(3)],
            axis=1,
        )
        self.p = {"wx": wx, "wh": wh, "b": np.zeros(3 * hidden, dtype=np.float32)}

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.din:
            raise ShapeMismatchError(f"gru expects (B, L, {self.din}), got {x.shape}")
        if x.shape[1] == 0:
            raise EmptySequenceError("gru got an empty sequence")
        _require_finite("gru", x)
        B, L, _ = x.shape
        H = self.h
        wh = self.p["wh"]
        # input-side projections for all steps at once
        xp = x.reshape(B * L, self.din) @ self.p["wx"] + self.p["b"]
        xp = xp.reshape(B, L, 3 * H)

        z_all = np.empty((B, L, H), dtype=xp.dtype)
        r_all = np.empty_like(z_all)
        n_all = np.empty_like(z_all)
        h_all = np.empty_like(z_all)
        h = np.zeros((B, H), dtype=xp.dtype)
        for t in range(L):
            zr = h @ wh[:, : 2 * H]
            z = sigmoid(xp[:, t, :H] + zr[:, :H])
            r = sigmoid(xp[:, t, H : 2 * H] + zr[:, H:])
            n = np.tanh(xp[:, t, 2 * H :] + (r * h) @ wh[:, 2 * H :])
            h = (1.0 - z) * n + z * h
            z_all[:, t] = z
            r_all[:, t] = r
            n_all[:, t] = n
            h_all[:, t] = h
        return h_all, (x, z_all, r_all, n_all, h_all)

    def backward(self, dy, cache):
        x, z_all, r_all, n_all, h_all = cache
        B, L, H = dy.shape
        wh = self.p["wh"]
        wh_zr = wh[:, : 2 * H]
        wh_n = wh[:, 2 * H :]

        # h_prev[t] = h[t-1], zero at t=0
        h_prev = np.empty_like(h_all)
        h_prev[:, 0] = 0.0
        h_prev[:, 1:] = h_all[:, :-1]

        da_all = np.empty((B, L, 3 * H), dtype=dy.dtype)
        carry = np.zeros((B, H), dtype=dy.dtype)
        for t in range(L - 1, -1, -1):
            dh = dy[:, t] + carry
            z, r, n, hp = z_all[:, t], r_all[:, t], n_all[:, t], h_prev[:, t]
            # h = (1 - z) n + z h_prev
            da_z = dh * (hp - n) * z * (1.0 - z)
            da_n = dh * (1.0 - z) * (1.0 - n * n)
            drh = da_n @ wh_n.T          # gradient into (r * h_prev)
            da_r = drh * hp * r * (1.0 - r)
            da_all[:, t, :H] = da_z
            da_all[:, t, H : 2 * H] = da_r
            da_all[:, t, 2 * H :] = da_n
            carry = (
                dh * z
                + np.concatenate([da_z, da_r], axis=1) @ wh_zr.T
                + drh * r
            )

        da2 = da_all.reshape(B * L, 3 * H)
        dx = (da2 @ self.p["wx"].T).reshape(B, L, self.din)
        hp2 = h_prev.reshape(B * L, H)
        grads = {
            "wx": x.reshape(B * L, self.din).T @ da2,
            "wh": np.concatenate(
                [hp2.T @ da2[:, : 2 * H],
                 (r_all.reshape(B * L, H) * hp2).T @ da2[:, 2 * H :]],
                axis=1,
            ),
            "b": da2.sum(axis=0),
        }
        return dx, grads


class LSTM(Layer):
    """LSTM with zero initial state, full sequence output.

    Gate order along the 4H axis is [i | f | g | o]::

        i, f, o = sigmoid(.), g = tanh(.)
        c_t = f * c_{t-1} + i * g
        h_t = o * tanh(c_t)

    The additive cell update is what carries gradients: with f ~ 1 the
    backward chain multiplies by ~1 per step.
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.din = in_dim
        self.h = hidden
        wx = np.concatenate(
            [glorot_uniform(rng, in_dim, hidden, (in_dim, hidden)) for _ in range(4)],
            axis=1,
        )
        wh = np.concatenate(
            [glorot_uniform(rng, hidden, hidden, (hidden, hidden)) for _ in range(4)],
            axis=1,
        )
        self.p = {"wx": wx, "wh": wh, "b": np.zeros(4 * hidden, dtype=np.float32)}

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.din:
            raise ShapeMismatchError(f"lstm expects (B, L, {self.din}), got {x.shape}")
        if x.shape[1] == 0:
            raise EmptySequenceError("lstm got an empty sequence")
        _require_finite("lstm", x)
        B, L, _ = x.shape
        H = self.h
        wh = self.p["wh"]
        xp = x.reshape(B * L, self.din) @ self.p["wx"] + self.p["b"]
        xp = xp.reshape(B, L, 4 * H)

        gates = np.empty((B, L, 4 * H), dtype=xp.dtype)  # post-activation i,f,g,o
        c_all = np.empty((B, L, H), dtype=xp.dtype)
        h_all = np.empty((B, L, H), dtype=xp.dtype)
        h = np.zeros((B, H), dtype=xp.dtype)
        c = np.zeros((B, H), dtype=xp.dtype)
        for t in range(L):
            a = xp[:, t] + h @ wh
            i = sigmoid(a[:, :H])
            f = sigmoid(a[:, H : 2 * H])
            g = np.tanh(a[:, 2 * H : 3 * H])
            o = sigmoid(a[:, 3 * H :])
            c = f * c + i * g
            h = o * np.tanh(c)
            gates[:, t, :H] = i
            gates[:, t, H : 2 * H] = f
            gates[:, t, 2 * H : 3 * H] = g
            gates[:, t, 3 * H :] = o
            c_all[:, t] = c
            h_all[:, t] = h
        return h_all, (x, gates, c_all, h_all)

    def backward(self, dy, cache):
        x, gates, c_all, h_all = cache
        B, L, H = dy.shape
        wh = self.p["wh"]

        c_prev = np.empty_like(c_all)
        c_prev[:, 0] = 0.0
        c_prev[:, 1:] = c_all[:, :-1]
        h_prev = np.empty_like(h_all)
        h_prev[:, 0] = 0.0
        h_prev[:, 1:] = h_all[:, :-1]

        da_all = np.empty((B, L, 4 * H), dtype=dy.dtype)
        dh_carry = np.zeros((B, H), dtype=dy.dtype)
        dc_carry = np.zeros((B, H), dtype=dy.dtype)
        for t in range(L - 1, -1, -1):
            i = gates[:, t, :H]
            f = gates[:, t, H : 2 * H]
            g = gates[:, t, 2 * H : 3 * H]
            o = gates[:, t, 3 * H :]
            tc = np.tanh(c_all[:, t])
            dh = dy[:, t] + dh_carry
            dc = dc_carry + dh * o * (1.0 - tc * tc)
            da = da_all[:, t]
            da[:, :H] = dc * g * i * (1.0 - i)
            da[:, H : 2 * H] = dc * c_prev[:, t] * f * (1.0 - f)
            da[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
            da[:, 3 * H :] = dh * tc * o * (1.0 - o)
            dc_carry = dc * f
            dh_carry = da @ wh.T

        da2 = da_all.reshape(B * L, 4 * H)
        dx = (da2 @ self.p["wx"].T).reshape(B, L, self.din)
        grads = {
            "wx": x.reshape(B * L, self.din).T @ da2,
            "wh": h_prev.reshape(B * L, H).T @ da2,
            "b": da2.sum(axis=0),
        }
        return dx, grads


class GlobalMaxPool(Layer):
    """Max over the sequence axis: (B, L, C) -> (B, C).

    On ties the gradient is routed to the first occurrence (argmax
    semantics), so backward is deterministic.
    """

    def forward(self, x):
        if x.ndim != 3:
            raise ShapeMismatchError(f"pool expects (B, L, C), got {x.shape}")
        if x.shape[1] == 0:
            raise EmptySequenceError("pool got an empty sequence")
        idx = np.argmax(x, axis=1)
        y = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]
        return y, (idx, x.shape)

    def backward(self, dy, cache):
        idx, shape = cache
        dx = np.zeros(shape, dtype=dy.dtype)
        np.put_along_axis(dx, idx[:, None, :], dy[:, None, :], axis=1)
        return dx, {}


class Dropout(Layer):
    """Inverted dropout: train mode scales kept units by 1/(1 - rate)."""

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, mode: str = "infer", rng: np.random.Generator | None = None):
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        if mode == "infer" or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype)
        mask = keep / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, dy, cache):
        if cache is None:
            return dy, {}
        return dy * cache, {}


def grad_check(layer, x, rng: np.random.Generator, epsilon: float = 1e-4,
               n_coords: int = 200, forward=None) -> dict:
    """Central-difference check of a layer's backward pass.

    The scalar probe is sum(forward(x) * P) for a fixed random projection
    P, whose analytic gradient is exactly backward(P).  ``n_coords``
    coordinates are sampled without replacement from the combined space
    of input entries and every parameter tensor (all of them when the
    layer is small), always in float64.

    Returns {"max_rel_err", "n_checked"}; relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    layer.cast(np.float64)
    x = x.astype(np.float64)
    fwd = forward if forward is not None else layer.forward

    y0, cache = fwd(x)
    proj = rng.standard_normal(y0.shape)
    dx, grads = layer.backward(proj, cache)

    def loss():
        y, _ = fwd(x)
        return float(np.sum(y * proj))

    tensors = [("<input>", x, dx)] + [(k, layer.p[k], grads[k]) for k in sorted(grads)]
    sizes = np.array([t.size for _, t, _ in tensors])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    n_take = min(n_coords, total)
    picked = np.sort(rng.choice(total, size=n_take, replace=False))

    max_rel = 0.0
    for g in picked:
        i = int(np.searchsorted(offsets, g, side="right") - 1)
        c = int(g - offsets[i])
        flat = tensors[i][1].reshape(-1)
        aflat = tensors[i][2].reshape(-1)
        keep = flat[c]
        flat[c] = keep + epsilon
        lp = loss()
        flat[c] = keep - epsilon
        lm = loss()
        flat[c] = keep
        numeric = (lp - lm) / (2.0 * epsilon)
        rel = abs(aflat[c] - numeric) / max(abs(aflat[c]), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    return {"max_rel_err": max_rel, "n_checked": n_take}
