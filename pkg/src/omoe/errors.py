"""Exception hierarchy shared by every module."""


class OmoeError(Exception):
    pass


class DimensionError(OmoeError, ValueError):
    pass


class ContractError(OmoeError, ValueError):
    pass


class NumericError(OmoeError, FloatingPointError):
    pass


class PrecisionError(OmoeError, TypeError):
    pass


class DegenerateStackError(NumericError):
    """A Gram-Schmidt residual collapsed below the degeneracy threshold."""


class ConfigError(OmoeError, ValueError):
    """Invalid run configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class NonFiniteLossError(NumericError):
    """Training produced a NaN/inf loss.

    Carries the optimizer step, the first adapter whose gradients went
    non-finite (if any) and the per-adapter gradient norms.
    """

    def __init__(self, step, layer=None, grad_norms=None):
        self.step = step
        self.layer = layer
        self.grad_norms = dict(grad_norms or {})
        worst = sorted(self.grad_norms.items(), key=lambda kv: -_sortable(kv[1]))[:5]
        detail = ", ".join(f"{k}={v:.3g}" for k, v in worst)
        super().__init__(f"non-finite loss at step {step} (layer={layer}; grad norms: {detail})")


class FrozenWeightError(OmoeError, RuntimeError):
    pass


def _sortable(x):
    return float("inf") if x != x else x
