"""Independent oracles shared by the test modules."""

import itertools

import numpy as np

from robustft import autodiff as ad
from robustft.models import Model, ModelSpec, build_model, reinit_head

FD_STEP = 1e-5


def numeric_grad(f, x, h=FD_STEP):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


class LinearSoftmax:
    """logits = flatten(x) @ W + b; loss is convex in x."""

    def __init__(self, W, b):
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.params = {"W": self.W, "b": self.b}

    def forward(self, x, params=None):
        x = x if isinstance(x, ad.Node) else ad.constant(x)
        h = ad.reshape(x, (x.shape[0], -1))
        return ad.bias_add(ad.matmul(h, ad.constant(self.W)), ad.constant(self.b))

    def logits(self, x):
        with ad.no_grad():
            return self.forward(x).value


def per_example_ce(logits, y):
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return lse - logits[np.arange(len(y)), y]


def vertex_max_loss(model, x, y, eps):
    """Exhaustive max of CE over every vertex of the clipped l-inf box (one example)."""
    lo = np.clip(x.ravel() - eps, 0.0, 1.0)
    hi = np.clip(x.ravel() + eps, 0.0, 1.0)
    d = lo.size
    corners = np.array(list(itertools.product((0, 1), repeat=d)), dtype=bool)
    pts = np.where(corners, hi, lo).reshape((len(corners),) + x.shape)
    losses = per_example_ce(model.logits(pts), np.full(len(corners), y))
    return float(losses.max())


def softplus_mlp(seed=0, d=6, hidden=(5, 4), k=3, head="seeded"):
    spec = ModelSpec("mlp", (1, 1, d), hidden=hidden, activation="softplus", num_classes=k)
    model = build_model(spec, seed)
    if head == "seeded":
        model = reinit_head(model, k, init="seeded", seed=seed + 100)
    return model


def model_with(model: Model, name: str, value) -> Model:
    out = model.copy()
    out.params[name] = np.array(value, dtype=np.float64)
    return out
