"""Shared numeric oracles and fixtures for the test suite.

The finite-difference gradient checker here is the independent reference
for every autodiff assertion: the engine is never used to validate itself.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from journeyrank import nn


def fd_gradcheck(make_loss: Callable[[], "nn.Tensor"],
                 params: dict[str, "nn.Tensor"],
                 h: float = 1e-5,
                 rtol: float = 1e-4,
                 atol: float = 1e-7) -> float:
    """Compare autodiff gradients against central finite differences.

    ``make_loss`` must be a deterministic function of the current values of
    ``params`` and return a scalar tensor. Returns the worst relative error
    seen, and raises AssertionError if any coordinate violates
    |autodiff - fd| <= rtol * max(|autodiff|, |fd|) + atol.
    """
    with nn.Tape() as tape:
        loss = make_loss()
    for t in params.values():
        t.zero_grad()
    nn.backward(tape, loss)
    grads = {name: t.grad.copy() for name, t in params.items()}

    worst = 0.0
    for name, t in params.items():
        flat = t.values.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(make_loss().values)
            flat[i] = orig - h
            dn = float(make_loss().values)
            flat[i] = orig
            fd = (up - dn) / (2.0 * h)
            a = gflat[i]
            err = abs(a - fd)
            bound = rtol * max(abs(a), abs(fd)) + atol
            rel = err / max(abs(a), abs(fd), 1e-12)
            worst = max(worst, rel)
            assert err <= bound, (
                f"{name}[{i}]: autodiff {a!r} vs fd {fd!r} "
                f"(err {err:.3e} > bound {bound:.3e})")
    return worst


def numpy_sigmoid(x: np.ndarray) -> np.ndarray:
    """Reference sigmoid used by scripted oracles (stable two-branch form)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tiny_manual_dataset(constant_prev: float = 2.0):
    """Three hand-built single-search journeys with a constant context
    column, small enough to reason about by eye."""
    from journeyrank.domain import (
        Dataset,
        DatasetSchema,
        ImpressionRecord,
        JourneyRecord,
        LabelVector,
        REQUIRED_CONTEXT_FEATURES,
        SearchRecord,
    )
    schema = DatasetSchema(listing_dim=2, context_dim=2,
                           context_features=REQUIRED_CONTEXT_FEATURES)
    full = LabelVector.from_milestones(("c", "lc", "pp", "req", "book", "unc"))
    journeys = []
    for g, days in enumerate([30.0, 90.0, 150.0]):
        imps = (
            ImpressionRecord(listing_id=f"L{g}a", position=1,
                             features=np.array([0.2 * g, 1.0]), labels=full),
            ImpressionRecord(listing_id=f"L{g}b", position=2,
                             features=np.array([-0.1 * g, 0.5]),
                             labels=LabelVector()),
        )
        search = SearchRecord(search_id=f"G{g}-S0", t_days=0.0,
                              context=np.array([days, constant_prev]),
                              impressions=imps)
        journeys.append(JourneyRecord(guest_id=f"G{g}", searches=(search,)))
    return Dataset(schema=schema, journeys=tuple(journeys))
