"""Estimator parameter handling, scikit-learn style.

Estimators here follow the sklearn convention: constructor arguments are
stored verbatim on the instance, ``get_params``/``set_params`` expose them,
and fitted state lives in trailing-underscore attributes. That is all
``sklearn.base.clone`` and pipeline composition require, without importing
scikit-learn.
"""

from __future__ import annotations

import inspect

import numpy as np

from .errors import ValidationError


class ParamsMixin:
    """get_params/set_params over the constructor signature."""

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [
            name
            for name, p in sig.parameters.items()
            if name != "self" and p.kind not in (p.VAR_POSITIONAL, p.VAR_KEYWORD)
        ]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValidationError(f"invalid parameter {key!r} for {type(self).__name__}")
            setattr(self, key, value)
        return self

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"


def check_points(X) -> np.ndarray:
    """Validate an (n, 3) finite float64 coordinate array."""
    pts = np.asarray(X, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError(f"expected an (n, 3) point array, got shape {pts.shape}")
    if pts.shape[0] == 0:
        raise ValidationError("point array is empty")
    if not np.isfinite(pts).all():
        raise ValidationError("point array contains NaN or Inf")
    return pts


def check_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise ValidationError(
            f"{type(estimator).__name__} is not fitted yet; call fit before this method"
        )
