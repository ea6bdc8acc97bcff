"""Learnable fake quantizers: DuQ, the PACT baseline, and optional QIL.

DuQ maps x through a learnable affine pre-transform, a clip to [0, 1], a
round onto N_lv levels, and a learnable affine post-transform:

    x_hat   = clip((x - b) / a', 0, 1)        a' = softplus(a)
    x_bar   = round((N_lv - 1) * x_hat) / (N_lv - 1)
    x_tilde = alpha' * x_bar + beta           alpha' = softplus(alpha)

so the output grid is {alpha'*k/(N_lv-1) + beta : k = 0..N_lv-1} and can sit
anywhere on the real line, including asymmetric ranges such as h-swish's
[-0.375, 3]. The backward pass is a straight-through estimator through the
round, with exact derivatives everywhere else; every input region feeds a
gradient to some parameter (below-range -> beta, in-range -> all, above-range
-> alpha and beta).

PACT clips to [0, p] with learnable p and, by its own convention, only routes
gradient to p from the truncated region (x >= p). QIL is kept behind a flag
for completeness; its output range is pinned to [0, 1], which is exactly the
limitation DuQ removes.

Rounding is half-away-from-zero everywhere, fixed across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _accumulate, _op, _wants_grad

__all__ = [
    "QuantParams",
    "PactParams",
    "duq_forward",
    "duq_backward",
    "pact_forward",
    "pact_backward",
    "make_weight_quantizer",
    "make_activation_quantizer",
    "DuqQuantizer",
    "PactQuantizer",
    "QilQuantizer",
    "round_half_away",
    "softplus",
    "softplus_inv",
    "sigmoid",
]

MODES = ("asymmetric", "symmetric", "non_negative")

MIN_RANGE = 1e-6  # smallest calibration range; keeps softplus_inv finite


def softplus(x: float | np.ndarray):
    return np.logaddexp(0.0, x)


def sigmoid(x: float | np.ndarray):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softplus_inv(y: float) -> float:
    """Inverse of softplus: ln(e^y - 1)."""
    if y <= 0:
        raise ValueError("softplus output is strictly positive")
    return float(np.log(np.expm1(y)))


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round halves away from zero (numpy's default rounds half to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class QuantParams:
    """DuQ quantizer state: pre-transform (a, b), post-transform (alpha, beta).

    a and alpha are stored pre-softplus, so a' = softplus(a) > 0 and
    alpha' = softplus(alpha) > 0 by construction. Symmetric mode derives
    beta = -alpha'/2 (levels symmetric about 0, odd n_lv) and non_negative
    mode derives beta = 0; both are re-coerced here so a QuantParams can
    never hold an inconsistent beta.
    """

    a: float
    b: float
    alpha: float
    beta: float
    n_lv: int
    mode: str = "asymmetric"

    def __post_init__(self):
        if not isinstance(self.n_lv, (int, np.integer)) or isinstance(self.n_lv, bool):
            raise TypeError(f"n_lv must be an integer, got {self.n_lv!r}")
        self.n_lv = int(self.n_lv)
        if self.n_lv < 2:
            raise ValueError("n_lv must be >= 2")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "symmetric":
            if self.n_lv % 2 == 0:
                raise ValueError("symmetric mode requires odd n_lv")
            self.beta = -float(softplus(self.alpha)) / 2.0
        elif self.mode == "non_negative":
            self.beta = 0.0
        self.a = float(self.a)
        self.b = float(self.b)
        self.alpha = float(self.alpha)
        self.beta = float(self.beta)

    @property
    def a_prime(self) -> float:
        return float(softplus(self.a))

    @property
    def alpha_prime(self) -> float:
        return float(softplus(self.alpha))

    def levels(self) -> np.ndarray:
        """The n_lv representable output values, ascending."""
        k = np.arange(self.n_lv, dtype=np.float64)
        return self.alpha_prime * (k / (self.n_lv - 1)) + self.beta


@dataclass
class PactParams:
    """PACT clipping threshold p > 0 plus the level count on [0, p]."""

    p: float
    n_lv: int

    def __post_init__(self):
        if self.p <= 0:
            raise ValueError("PACT threshold p must be > 0")
        self.n_lv = int(self.n_lv)
        if self.n_lv < 2:
            raise ValueError("n_lv must be >= 2")


# ---------------------------------------------------------------------------
# pure forward/backward kernels
# ---------------------------------------------------------------------------

def duq_forward(x: np.ndarray, q: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    ap = q.a_prime
    alp = q.alpha_prime
    xhat = np.clip((x - q.b) / ap, 0.0, 1.0)
    xbar = round_half_away((q.n_lv - 1) * xhat) / (q.n_lv - 1)
    return alp * xbar + q.beta


def duq_backward(x: np.ndarray, q: QuantParams, upstream: np.ndarray):
    """Gradients (grad_x, grad_a, grad_b, grad_alpha, grad_beta).

    Straight-through through the round (d x_bar / d x_hat = 1); the clip is
    differentiated exactly, so saturated inputs send nothing to x, a, b.
    Parameter grads include the softplus chain for a and alpha.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    ap = q.a_prime
    alp = q.alpha_prime
    s = (x - q.b) / ap
    mid = (s > 0.0) & (s < 1.0)
    xbar = round_half_away((q.n_lv - 1) * np.clip(s, 0.0, 1.0)) / (q.n_lv - 1)

    up_mid = np.where(mid, upstream, 0.0)
    grad_x = up_mid * (alp / ap)
    grad_a = float((up_mid * (-alp / ap) * s).sum()) * float(sigmoid(q.a))
    grad_b = float((up_mid * (-alp / ap)).sum())
    grad_alpha = float((upstream * xbar).sum()) * float(sigmoid(q.alpha))
    grad_beta = float(upstream.sum())
    return grad_x, grad_a, grad_b, grad_alpha, grad_beta


def pact_forward(x: np.ndarray, pp: PactParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.clip(x, 0.0, pp.p)
    # q/(n-1) == 1 exactly at the top level, so x = p returns p bitwise.
    q = round_half_away(y * ((pp.n_lv - 1) / pp.p))
    return q / (pp.n_lv - 1) * pp.p


def pact_backward(x: np.ndarray, pp: PactParams, upstream: np.ndarray):
    """Gradients (grad_x, grad_p): p only learns from the clipped region."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    grad_x = np.where((x >= 0.0) & (x < pp.p), upstream, 0.0)
    grad_p = float(upstream[x >= pp.p].sum())
    return grad_x, grad_p


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def _check_bit(bit) -> int:
    if not isinstance(bit, (int, np.integer)) or isinstance(bit, bool):
        raise TypeError(f"bit width must be an integer, got {bit!r}")
    if not 2 <= bit <= 8:
        raise ValueError(f"bit width must be in [2, 8], got {bit}")
    return int(bit)


def weight_levels(bit: int) -> int:
    """Weights use odd level counts 2^bit - 1 so the grid contains 0."""
    return 2 ** _check_bit(bit) - 1


def activation_levels(bit: int) -> int:
    return 2 ** _check_bit(bit)


def make_weight_quantizer(weight: np.ndarray, bit: int) -> QuantParams:
    """Symmetric quantizer with n_lv = 2^bit - 1 covering +/- 3*std(weight)."""
    n_lv = weight_levels(bit)
    half = max(3.0 * float(np.asarray(weight, dtype=np.float64).std()), MIN_RANGE)
    width = softplus_inv(2.0 * half)
    return QuantParams(a=width, b=-half, alpha=width, beta=-half,
                       n_lv=n_lv, mode="symmetric")


def make_activation_quantizer(calibration: np.ndarray, bit: int,
                              beta_pin: float | None = None) -> QuantParams:
    """Asymmetric quantizer with n_lv = 2^bit spanning one calibration batch.

    With `beta_pin` the bottom output level is fixed at the pin (used to align
    the grid with an activation function's constant minimum, e.g. -0.375).
    """
    n_lv = activation_levels(bit)
    cal = np.asarray(calibration, dtype=np.float64)
    lo = float(cal.min()) if beta_pin is None else float(beta_pin)
    hi = max(float(cal.max()), lo + MIN_RANGE)
    width = softplus_inv(hi - lo)
    return QuantParams(a=width, b=lo, alpha=width, beta=lo,
                       n_lv=n_lv, mode="asymmetric")


# ---------------------------------------------------------------------------
# trainable quantizers (autodiff-integrated)
# ---------------------------------------------------------------------------

class DuqQuantizer:
    """DuQ with learnable (a, b, alpha, beta) living on the gradient tape.

    `mode` fixes how beta behaves: asymmetric learns it, symmetric derives it
    from alpha (levels stay symmetric about 0), non_negative pins it at 0.
    `beta_pin` freezes beta at a constant in asymmetric mode, which is how the
    negative-padding path keeps -0.375 as the exact bottom level.
    `static` recalibrates from the input tensor's statistics on every call
    instead of learning (weight-statistics-derived variant).
    """

    kind = "duq"

    def __init__(self, params: QuantParams, beta_pin: float | None = None,
                 static: bool = False, static_bit: int | None = None):
        if beta_pin is not None and params.mode != "asymmetric":
            raise ValueError("beta_pin only applies to asymmetric mode")
        self.n_lv = params.n_lv
        self.mode = params.mode
        self.beta_pin = beta_pin
        self.static = static
        self.static_bit = static_bit
        learn = not static
        self.a = Tensor(params.a, requires_grad=learn)
        self.b = Tensor(params.b, requires_grad=learn)
        self.alpha = Tensor(params.alpha, requires_grad=learn)
        beta = params.beta if beta_pin is None else float(beta_pin)
        self.beta = Tensor(beta, requires_grad=learn and self.mode == "asymmetric"
                           and beta_pin is None)

    @classmethod
    def for_weights(cls, weight: np.ndarray, bit: int, static: bool = False) -> "DuqQuantizer":
        return cls(make_weight_quantizer(weight, bit), static=static, static_bit=bit)

    @classmethod
    def for_activations(cls, calibration: np.ndarray, bit: int,
                        beta_pin: float | None = None) -> "DuqQuantizer":
        return cls(make_activation_quantizer(calibration, bit, beta_pin),
                   beta_pin=beta_pin)

    def params(self) -> list[tuple[str, Tensor]]:
        if self.static:
            return []
        named = [("a", self.a), ("b", self.b), ("alpha", self.alpha)]
        if self.mode == "asymmetric" and self.beta_pin is None:
            named.append(("beta", self.beta))
        return named

    def effective_beta(self) -> float:
        if self.beta_pin is not None:
            return float(self.beta_pin)
        if self.mode == "symmetric":
            return -float(softplus(self.alpha.item())) / 2.0
        if self.mode == "non_negative":
            return 0.0
        return self.beta.item()

    def snapshot(self) -> QuantParams:
        return QuantParams(a=self.a.item(), b=self.b.item(),
                           alpha=self.alpha.item(), beta=self.effective_beta(),
                           n_lv=self.n_lv, mode="asymmetric" if self.beta_pin is not None
                           else self.mode)

    def set_n_lv(self, n_lv: int) -> None:
        if self.mode == "symmetric" and n_lv % 2 == 0:
            raise ValueError("symmetric mode requires odd n_lv")
        if n_lv < 2:
            raise ValueError("n_lv must be >= 2")
        self.n_lv = int(n_lv)

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.static:
            return duq_forward(x, make_weight_quantizer(x, self.static_bit))
        return duq_forward(x, self.snapshot())

    def __call__(self, x: Tensor) -> Tensor:
        if self.static:
            q = make_weight_quantizer(x.data, self.static_bit)
            out_data = duq_forward(x.data, q)

            def bw(out):
                def run():
                    if _wants_grad(x):
                        gx, _, _, _, _ = duq_backward(x.data, q, out.grad)
                        _accumulate(x, gx)
                return run

            return _op(out_data, (x,), bw, "duq")

        q = self.snapshot()
        out_data = duq_forward(x.data, q)
        a, b, alpha, beta = self.a, self.b, self.alpha, self.beta
        mode, pin = self.mode, self.beta_pin

        def bw(out):
            def run():
                gx, ga, gb, galpha, gbeta = duq_backward(x.data, q, out.grad)
                if _wants_grad(x):
                    _accumulate(x, gx)
                if a.requires_grad:
                    _accumulate(a, np.asarray(ga))
                if b.requires_grad:
                    _accumulate(b, np.asarray(gb))
                if alpha.requires_grad:
                    total = galpha
                    if mode == "symmetric":
                        # beta = -softplus(alpha)/2 folds its grad into alpha
                        total = galpha - 0.5 * gbeta * float(sigmoid(alpha.data))
                    _accumulate(alpha, np.asarray(total))
                if mode == "asymmetric" and pin is None and beta.requires_grad:
                    _accumulate(beta, np.asarray(gbeta))
            return run

        return _op(out_data, (x, a, b, alpha, beta), bw, "duq")


class PactQuantizer:
    """PACT activation quantizer with learnable clipping threshold p."""

    kind = "pact"

    def __init__(self, params: PactParams):
        self.n_lv = params.n_lv
        self.p = Tensor(params.p, requires_grad=True)

    @classmethod
    def for_activations(cls, calibration: np.ndarray, bit: int) -> "PactQuantizer":
        p0 = max(float(np.asarray(calibration).max()), MIN_RANGE)
        return cls(PactParams(p=p0, n_lv=activation_levels(bit)))

    def params(self) -> list[tuple[str, Tensor]]:
        return [("p", self.p)]

    def snapshot(self) -> PactParams:
        return PactParams(p=self.p.item(), n_lv=self.n_lv)

    def set_n_lv(self, n_lv: int) -> None:
        if n_lv < 2:
            raise ValueError("n_lv must be >= 2")
        self.n_lv = int(n_lv)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return pact_forward(x, self.snapshot())

    def __call__(self, x: Tensor) -> Tensor:
        pp = self.snapshot()
        out_data = pact_forward(x.data, pp)
        p = self.p

        def bw(out):
            def run():
                gx, gp = pact_backward(x.data, pp, out.grad)
                if _wants_grad(x):
                    _accumulate(x, gx)
                if p.requires_grad:
                    _accumulate(p, np.asarray(gp))
            return run

        return _op(out_data, (x, p), bw, "pact")


class QilQuantizer:
    """Interval-learning quantizer (feature-flagged baseline).

    Learns a center c and width d' = softplus(d); inputs map through
    clip((x - c)/d' + 1/2, 0, 1) and round onto n_lv levels. The output range
    is inherently [0, 1], which breaks asymmetric activations; it is included
    only so that failure mode can be reproduced.
    """

    kind = "qil"

    def __init__(self, center: float, width: float, n_lv: int):
        self.n_lv = int(n_lv)
        self.c = Tensor(center, requires_grad=True)
        self.d = Tensor(softplus_inv(max(width, MIN_RANGE)), requires_grad=True)

    @classmethod
    def for_activations(cls, calibration: np.ndarray, bit: int) -> "QilQuantizer":
        cal = np.asarray(calibration, dtype=np.float64)
        lo, hi = float(cal.min()), float(cal.max())
        return cls(center=0.5 * (lo + hi), width=max(hi - lo, MIN_RANGE),
                   n_lv=activation_levels(bit))

    def params(self) -> list[tuple[str, Tensor]]:
        return [("c", self.c), ("d", self.d)]

    def set_n_lv(self, n_lv: int) -> None:
        self.n_lv = int(n_lv)

    def _transform(self, x: np.ndarray):
        dp = float(softplus(self.d.item()))
        s = (x - self.c.item()) / dp + 0.5
        xhat = np.clip(s, 0.0, 1.0)
        xbar = round_half_away((self.n_lv - 1) * xhat) / (self.n_lv - 1)
        return xbar, s, dp

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self._transform(np.asarray(x, dtype=np.float64))[0]

    def __call__(self, x: Tensor) -> Tensor:
        out_data, s, dp = self._transform(x.data)
        c, d = self.c, self.d

        def bw(out):
            def run():
                mid = (s > 0.0) & (s < 1.0)
                up_mid = np.where(mid, out.grad, 0.0)
                if _wants_grad(x):
                    _accumulate(x, up_mid / dp)
                if c.requires_grad:
                    _accumulate(c, np.asarray(float((-up_mid / dp).sum())))
                if d.requires_grad:
                    gd = float((up_mid * (-(s - 0.5) / dp)).sum()) * float(sigmoid(d.data))
                    _accumulate(d, np.asarray(gd))
            return run

        return _op(out_data, (x, c, d), bw, "qil")
