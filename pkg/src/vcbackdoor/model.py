"""Reference classifier: two conv blocks over log-mel input, time pooling, MLP head.

Pure numpy forward/backward so the gradients can be checked against finite
differences.  Convolutions are im2col + matmul; the patch gathering and
pooling are the numba-accelerated kernels.
"""

from __future__ import annotations

import numpy as np

from .kernels import col2im, im2col, maxpool2, maxpool2_backward

KERNEL = 3


class SmallConvNet:
    """conv(3x3)-relu-pool x2 -> mean over time -> dense-relu -> dense.

    Input is ``(batch, n_mels, frames)``; output is unnormalised logits.
    """

    def __init__(self, n_mels: int, num_classes: int, channels=(8, 32), hidden: int = 128):
        self.n_mels = int(n_mels)
        self.num_classes = int(num_classes)
        self.channels = tuple(int(c) for c in channels)
        self.hidden = int(hidden)
        if self.n_mels < 4:
            raise ValueError("SmallConvNet needs n_mels >= 4 (two 2x poolings)")

    @property
    def pooled_height(self) -> int:
        return (self.n_mels // 2) // 2

    def param_shapes(self) -> dict[str, tuple]:
        c1, c2 = self.channels
        k2 = KERNEL * KERNEL
        flat = c2 * self.pooled_height
        return {
            "conv1_w": (k2 * 1, c1), "conv1_b": (c1,),
            "conv2_w": (k2 * c1, c2), "conv2_b": (c2,),
            "fc1_w": (flat, self.hidden), "fc1_b": (self.hidden,),
            "fc2_w": (self.hidden, self.num_classes), "fc2_b": (self.num_classes,),
        }

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
        params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith("_b"):
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in = shape[0]
                params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        return params

    # -- forward / backward ------------------------------------------------

    @staticmethod
    def _conv(x, w, b):
        B, _, H, W = x.shape
        cols = im2col(x, KERNEL)  # B,H,W,Cin*9
        out = cols.reshape(-1, cols.shape[-1]) @ w + b
        return out.reshape(B, H, W, -1).transpose(0, 3, 1, 2), cols

    def forward(self, params, x, keep: bool = False):
        x = x[:, None, :, :]
        z1, cols1 = self._conv(x, params["conv1_w"], params["conv1_b"])
        a1 = np.maximum(z1, 0)
        p1, arg1 = maxpool2(a1)
        z2, cols2 = self._conv(p1, params["conv2_w"], params["conv2_b"])
        a2 = np.maximum(z2, 0)
        p2, arg2 = maxpool2(a2)
        g = p2.mean(axis=3).reshape(p2.shape[0], -1)
        h = g @ params["fc1_w"] + params["fc1_b"]
        r = np.maximum(h, 0)
        logits = r @ params["fc2_w"] + params["fc2_b"]
        if not keep:
            return logits, None
        cache = dict(cols1=cols1, z1=z1, a1_shape=a1.shape, arg1=arg1, p1_shape=p1.shape,
                     cols2=cols2, z2=z2, a2_shape=a2.shape, arg2=arg2, p2_shape=p2.shape,
                     g=g, h=h, r=r)
        return logits, cache

    def backward(self, params, cache, dlogits):
        grads = {}
        r, h, g = cache["r"], cache["h"], cache["g"]
        grads["fc2_w"] = r.T @ dlogits
        grads["fc2_b"] = dlogits.sum(axis=0)
        dh = (dlogits @ params["fc2_w"].T) * (h > 0)
        grads["fc1_w"] = g.T @ dh
        grads["fc1_b"] = dh.sum(axis=0)
        dg = dh @ params["fc1_w"].T

        B, C2, H2, W2 = cache["p2_shape"]
        dp2 = np.repeat((dg.reshape(B, C2, H2) / W2)[..., None], W2, axis=3)
        da2 = maxpool2_backward(dp2, cache["arg2"], cache["a2_shape"][2], cache["a2_shape"][3])
        dz2 = da2 * (cache["z2"] > 0)
        dz2_flat = dz2.transpose(0, 2, 3, 1).reshape(-1, C2)
        cols2 = cache["cols2"]
        grads["conv2_w"] = cols2.reshape(-1, cols2.shape[-1]).T @ dz2_flat
        grads["conv2_b"] = dz2_flat.sum(axis=0)
        dcols2 = (dz2_flat @ params["conv2_w"].T).reshape(cols2.shape)
        dp1 = col2im(dcols2, self.channels[0], KERNEL)

        a1_shape = cache["a1_shape"]
        da1 = maxpool2_backward(dp1, cache["arg1"], a1_shape[2], a1_shape[3])
        dz1 = da1 * (cache["z1"] > 0)
        dz1_flat = dz1.transpose(0, 2, 3, 1).reshape(-1, self.channels[0])
        cols1 = cache["cols1"]
        grads["conv1_w"] = cols1.reshape(-1, cols1.shape[-1]).T @ dz1_flat
        grads["conv1_b"] = dz1_flat.sum(axis=0)
        return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    probs = softmax(logits.astype(np.float64))
    n = labels.shape[0]
    loss = -np.log(np.maximum(probs[np.arange(n), labels], 1e-300)).mean()
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), (dlogits / n).astype(logits.dtype)


ARCHITECTURES = {
    "small_conv": SmallConvNet,
}


def build_network(architecture: str, n_mels: int, num_classes: int, **options):
    try:
        cls = ARCHITECTURES[architecture]
    except KeyError:
        raise ValueError(
            f"unknown architecture {architecture!r}; registered: {sorted(ARCHITECTURES)}"
        ) from None
    return cls(n_mels, num_classes, **options)


def register_architecture(name: str, cls) -> None:
    """Add a network class exposing the :class:`SmallConvNet` interface."""
    ARCHITECTURES[name] = cls
