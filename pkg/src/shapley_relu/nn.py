"""A small dense network with ReLU, Shapley Activation and ShapLU backends.

Everything is batched numpy. Shapley statistics are computed per sample: for
a layer with weights ``W`` and a batch ``X`` the per-neuron sums of products
and of squared products are ``X @ W.T`` and ``X**2 @ (W**2).T``, so the
``[batch, fan_out, fan_in]`` product tensor is never materialised.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from .shapley_core import gate_terms
from .special import norm_pdf


class Activation(str, Enum):
    IDENTITY = "identity"
    RELU = "relu"
    SA = "sa"
    SHAPLU = "shaplu"
    SOFTMAX = "softmax"


RELU_FAMILY = (Activation.RELU, Activation.SHAPLU)


class NumericalError(FloatingPointError):
    """Raised when a loss, gradient or parameter stops being finite."""


def softmax(z):
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(eq=False)
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.RELU
    include_correction: bool = False  # ShapLU only

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=float, ndmin=2)
        self.bias = np.array(self.bias, dtype=float, ndmin=1)
        self.activation = Activation(self.activation)
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match fan_out {self.weights.shape[0]}"
            )
        self.grad_w: Optional[np.ndarray] = None
        self.grad_b: Optional[np.ndarray] = None
        self._cache: Optional[dict] = None

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    @property
    def inputs(self) -> np.ndarray:
        return self._require_cache()["x"]

    @property
    def preactivation(self) -> np.ndarray:
        return self._require_cache()["s"]

    @property
    def output(self) -> np.ndarray:
        return self._require_cache()["y"]

    @property
    def gate(self) -> np.ndarray:
        """Cached ``Phi((mu + b) / sigma)`` per sample and neuron (SA / ShapLU)."""
        cache = self._require_cache()
        if "gate" not in cache:
            raise ValueError(f"{self.activation.value} layer has no Shapley gate")
        return cache["gate"]

    def _require_cache(self) -> dict:
        if self._cache is None:
            raise RuntimeError("forward must be called before reading layer caches")
        return self._cache

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.fan_in:
            raise ValueError(f"expected input of shape [batch, {self.fan_in}], got {x.shape}")
        sum_p = x @ self.weights.T
        s = sum_p + self.bias
        cache = {"x": x, "s": s}
        act = self.activation
        if act is Activation.IDENTITY:
            y = s
        elif act is Activation.SOFTMAX:
            y = softmax(s)
        elif act is Activation.RELU:
            y = np.maximum(s, 0.0)
        else:
            sum_p2 = (x * x) @ (self.weights * self.weights).T
            mu, sigma, t, gate, degenerate = gate_terms(sum_p, sum_p2, self.bias)
            cache.update(mu=mu, sigma=sigma, t=t, gate=gate, degenerate=degenerate)
            y = gate * s if act is Activation.SA else np.maximum(s, 0.0)
        cache["y"] = y
        self._cache = cache
        return y

    def _shapley_factors(self, grad_out):
        """Upstream gradient times the coefficients of ``dy/dp`` as a polynomial in ``p``."""
        c = self._cache
        s, mu, sigma, gate, degenerate = c["s"], c["mu"], c["sigma"], c["gate"], c["degenerate"]
        safe_sigma = np.where(degenerate, 1.0, sigma)
        dens = np.where(degenerate, 0.0, norm_pdf(c["t"]))
        half_inv = 0.5 / safe_sigma
        curv = (mu + self.bias) / (6.0 * safe_sigma**3)
        d_bias = gate + dens * s / safe_sigma
        if self.activation is Activation.SA:
            # dy/dp_k = A + C p_k
            coeffs = [gate + dens * s * (half_inv - curv * mu), -dens * s * curv]
        elif self.include_correction:
            # dy/dp_k = gate + dens (p_k + b/n)(K - curv p_k), K = 1/(2 sigma) - curv mu
            share = self.bias / self.fan_in
            k = half_inv - curv * mu
            coeffs = [gate + dens * k * share, dens * (k - curv * share), -dens * curv]
        else:
            coeffs = [gate]
        return [grad_out * a for a in coeffs], grad_out * d_bias

    def backward(self, grad_out: np.ndarray, wrt_preactivation: bool = False) -> np.ndarray:
        """Accumulate parameter gradients and return the gradient w.r.t. the input.

        ``wrt_preactivation`` means ``grad_out`` already is ``dL/ds`` (used for
        the fused softmax + cross-entropy gradient).
        """
        c = self._require_cache()
        x, s = c["x"], c["s"]
        g = np.asarray(grad_out, dtype=float)
        if g.shape != s.shape:
            raise ValueError(f"gradient shape {g.shape} does not match output {s.shape}")
        act = self.activation
        if wrt_preactivation or act is Activation.IDENTITY:
            gs = g
        elif act is Activation.SOFTMAX:
            y = c["y"]
            gs = y * (g - (g * y).sum(axis=1, keepdims=True))
        elif act is Activation.RELU:
            gs = g * (s > 0)
        else:
            terms, g_bias = self._shapley_factors(g)
            w = self.weights
            grad_x = np.zeros_like(x)
            grad_w = np.zeros_like(w)
            for i, gt in enumerate(terms):
                # term i of dy/dp is gt * p^i, and p = w x
                if i == 0:
                    grad_x += gt @ w
                    grad_w += gt.T @ x
                else:
                    grad_x += x**i * (gt @ w ** (i + 1))
                    grad_w += w**i * (gt.T @ x ** (i + 1))
            self.grad_w = grad_w
            self.grad_b = g_bias.sum(axis=0)
            return grad_x
        self.grad_w = gs.T @ x
        self.grad_b = gs.sum(axis=0)
        return gs @ self.weights


@dataclass(eq=False)
class Network:
    layers: List[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            if layer.activation is Activation.SOFTMAX and i != len(self.layers) - 1:
                raise ValueError("softmax is only allowed on the final layer")
            if i and layer.fan_in != self.layers[i - 1].fan_out:
                raise ValueError(
                    f"layer {i} fan_in {layer.fan_in} != layer {i - 1} fan_out "
                    f"{self.layers[i - 1].fan_out}"
                )

    @classmethod
    def dense(
        cls,
        sizes: Sequence[int],
        hidden: Activation = Activation.RELU,
        output: Activation = Activation.SOFTMAX,
        seed: int = 0,
        include_correction: bool = False,
    ) -> "Network":
        """Glorot-initialised MLP ``sizes[0] -> ... -> sizes[-1]``."""
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = output if i == len(sizes) - 2 else hidden
            layers.append(
                DenseLayer(np.zeros((n_out, n_in)), np.zeros(n_out), act, include_correction)
            )
        return init_params(cls(layers), seed=seed)

    @property
    def sizes(self) -> List[int]:
        return [self.layers[0].fan_in] + [layer.fan_out for layer in self.layers]

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=float)
        if h.ndim == 1:
            h = h[None, :]
        for layer in self.layers:
            h = layer.forward(h)
        return h

    __call__ = forward

    def backward(self, grad_out: np.ndarray, wrt_logits: bool = False) -> np.ndarray:
        """Backpropagate; returns ``dL/d input``. Parameter grads land on the layers."""
        g = np.asarray(grad_out, dtype=float)
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            g = self.layers[i].backward(g, wrt_preactivation=(wrt_logits and i == last))
        return g

    def parameters(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def gradients(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            if layer.grad_w is None:
                raise RuntimeError("backward has not been run")
            out += [layer.grad_w, layer.grad_b]
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).argmax(axis=1)

    def with_activation(self, hidden: Activation, include_correction: Optional[bool] = None) -> "Network":
        """Copy with every hidden layer switched to ``hidden``; parameters are copied."""
        net = copy.deepcopy(self)
        for layer in net.layers[:-1]:
            layer.activation = Activation(hidden)
            if include_correction is not None:
                layer.include_correction = include_correction
            layer._cache = None
        return net


def init_params(net: Network, scheme: str = "glorot_uniform", seed: int = 0) -> Network:
    """Glorot-uniform weights ``U(-L, L)``, ``L = sqrt(6 / (fan_in + fan_out))``; zero bias."""
    if scheme != "glorot_uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        limit = math.sqrt(6.0 / (layer.fan_in + layer.fan_out))
        layer.weights = rng.uniform(-limit, limit, size=layer.weights.shape)
        layer.bias = np.zeros(layer.fan_out)
    return net


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray, floor: float = 1e-12):
    """Mean negative log-likelihood and its gradient w.r.t. the softmax input."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    batch = probs.shape[0]
    picked = probs[np.arange(batch), labels]
    loss = float(-np.log(np.maximum(picked, floor)).mean())
    grad = probs.copy()
    grad[np.arange(batch), labels] -= 1.0
    return loss, grad / batch


# ---------------------------------------------------------------------------
# Optimisers


def _check_finite(grads):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient encountered; aborting step")


@dataclass
class SGD:
    learning_rate: float = 0.01

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        _check_finite(grads)
        for p, g in zip(params, grads):
            p -= self.learning_rate * g


@dataclass
class Adam:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Optional[List[np.ndarray]] = None
    v: Optional[List[np.ndarray]] = None

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        _check_finite(grads)
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, learning_rate: float, **kwargs):
    kind = kind.lower()
    if kind == "sgd":
        return SGD(learning_rate)
    if kind == "adam":
        return Adam(learning_rate, **kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")


def train_step(net: Network, optimizer, x: np.ndarray, labels: np.ndarray) -> float:
    """One forward/backward/update on a batch; returns the batch loss."""
    probs = net.forward(x)
    loss, grad = cross_entropy_loss(probs, labels)
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss}")
    net.backward(grad, wrt_logits=True)
    params = net.parameters()
    optimizer.step(params, net.gradients())
    for p in params:
        if not np.all(np.isfinite(p)):
            raise NumericalError("parameters became non-finite")
    return loss


# ---------------------------------------------------------------------------
# Finite-difference gradient check


@dataclass
class LayerCheck:
    layer: int
    activation: str
    checked: int = 0
    skipped_kinks: int = 0
    max_rel_err: float = 0.0
    exempt: bool = False


@dataclass
class GradCheckReport:
    tolerance: float
    layers: List[LayerCheck]

    @property
    def max_rel_err(self) -> float:
        gated = [c.max_rel_err for c in self.layers if not c.exempt]
        return max(gated, default=0.0)

    @property
    def shaplu_deviation(self) -> float:
        dev = [c.max_rel_err for c in self.layers if c.exempt]
        return max(dev, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def lines(self) -> List[str]:
        out = []
        for c in self.layers:
            tag = "exempt (ShapLU)" if c.exempt else ("ok" if c.max_rel_err <= self.tolerance else "FAIL")
            out.append(
                f"layer {c.layer} [{c.activation}] checked={c.checked} "
                f"kink-skipped={c.skipped_kinks} max_rel_err={c.max_rel_err:.3e} {tag}"
            )
        return out


def _probe_loss(net, x, labels, projection):
    out = net.forward(x)
    if net.layers[-1].activation is Activation.SOFTMAX:
        return cross_entropy_loss(out, labels)[0]
    return float((out * projection).sum())


def _relu_preacts(net):
    return [layer.preactivation.copy() if layer.activation in RELU_FAMILY else None for layer in net.layers]


def grad_check(
    net: Network,
    x: np.ndarray,
    labels: Optional[np.ndarray] = None,
    tolerance: float = 1e-4,
    n_params: int = 200,
    step: float = 1e-5,
    seed: int = 0,
    kink_tol: float = 1e-3,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Central finite differences against ``backward`` on a random parameter sample.

    At least ``n_params`` parameters (or all of them, if fewer) are drawn
    per layer. Parameters whose perturbation moves any ReLU-family
    pre-activation lying within ``kink_tol`` of zero are skipped. Parameters
    of ShapLU layers, or of layers feeding one, carry deliberately
    inconsistent gradients and are reported but never gated.
    Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``; the floor keeps
    round-off in the differences of near-zero gradients from reading as error.
    """
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    projection = None
    if net.layers[-1].activation is Activation.SOFTMAX:
        if labels is None:
            raise ValueError("labels are required for a softmax network")
    else:
        projection = rng.standard_normal((x.shape[0], net.layers[-1].fan_out))
    out = net.forward(x)
    if projection is None:
        _, grad = cross_entropy_loss(out, labels)
        net.backward(grad, wrt_logits=True)
    else:
        net.backward(projection)
    base_pre = _relu_preacts(net)
    shaplu_at = [i for i, layer in enumerate(net.layers) if layer.activation is Activation.SHAPLU]
    last_shaplu = max(shaplu_at, default=-1)

    checks = []
    for li, layer in enumerate(net.layers):
        check = LayerCheck(li, layer.activation.value, exempt=li <= last_shaplu)
        for param, analytic in ((layer.weights, layer.grad_w.copy()), (layer.bias, layer.grad_b.copy())):
            flat = param.reshape(-1)
            count = min(flat.size, max(n_params, 1))
            idx = rng.choice(flat.size, size=count, replace=False)
            for j in idx:
                old = flat[j]
                flat[j] = old + step
                f_plus = _probe_loss(net, x, labels, projection)
                pre_plus = _relu_preacts(net)
                flat[j] = old - step
                f_minus = _probe_loss(net, x, labels, projection)
                pre_minus = _relu_preacts(net)
                flat[j] = old
                near_kink = False
                for b, p, m in zip(base_pre, pre_plus, pre_minus):
                    if b is None:
                        continue
                    moved = (p != b) | (m != b)
                    if np.any(np.abs(b[moved]) < kink_tol):
                        near_kink = True
                        break
                if near_kink:
                    check.skipped_kinks += 1
                    continue
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = analytic.reshape(-1)[j]
                err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
                check.max_rel_err = max(check.max_rel_err, err)
                check.checked += 1
        checks.append(check)
    net.forward(x)  # leave caches consistent with the unperturbed parameters
    return GradCheckReport(tolerance, checks)
