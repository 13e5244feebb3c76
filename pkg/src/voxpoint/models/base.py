"""Persistence shared by every trainable estimator in the package.

Each estimator keeps all of its learnable tensors in a single
:class:`~voxpoint.autodiff.ParameterStore` (attribute ``params_``).  ``save``
writes two files next to each other:

* ``<path>``            -- the binary parameter checkpoint (``VPPC`` format),
* ``<path>.meta.json``  -- the estimator class name, its constructor
  hyper-parameters, and a small dict of extra fitted state (e.g. label
  vocabularies) that is not a float tensor.

``load`` is a classmethod that reads the sidecar, reconstructs the estimator
with the recorded hyper-parameters, asks the subclass to rebuild its layer
graph (``_restore``), and then copies the checkpoint tensors in by name.
Round trips are bitwise: the rebuilt estimator produces identical outputs.
"""

from __future__ import annotations

import json
import os

from sklearn.utils.validation import check_is_fitted

from ..autodiff import ParameterStore

__all__ = ["StoreModelMixin"]


def _jsonable(value):
    """Map hyper-parameter values onto JSON types (tuples become lists)."""
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, (list, dict, str, bool, type(None))):
        return value
    if isinstance(value, int):
        return int(value)
    if isinstance(value, float):
        return float(value)
    try:  # numpy scalars
        return value.item()
    except AttributeError:
        return value


class StoreModelMixin:
    """save/load for estimators whose weights live in a ParameterStore."""

    def _extra_state(self) -> dict:
        """Fitted state beyond the parameter tensors; JSON-serializable."""
        return {}

    def _restore(self, store: ParameterStore, extra: dict) -> None:
        """Rebuild the layer graph and adopt ``store``'s tensors.

        Subclasses must leave the estimator fitted (``params_`` set, any
        derived attributes recomputed) when this returns.
        """
        raise NotImplementedError

    def save(self, path: str) -> None:
        check_is_fitted(self)
        path = os.fspath(path)
        self.params_.save(path)
        meta = {
            "class": type(self).__name__,
            "format": "voxpoint-model",
            "hyper": {k: _jsonable(v) for k, v in self.get_params(deep=False).items()},
            "extra": self._extra_state(),
        }
        with open(path + ".meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str):
        path = os.fspath(path)
        with open(path + ".meta.json", "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        if meta.get("class") != cls.__name__:
            raise ValueError(
                f"checkpoint at {path!r} holds a {meta.get('class')!r}, "
                f"not a {cls.__name__!r}"
            )
        hyper = meta.get("hyper", {})
        est = cls(**hyper)
        store = ParameterStore.load(path)
        est._restore(store, meta.get("extra", {}))
        return est
