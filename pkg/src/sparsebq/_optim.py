"""Quasi-Newton ascent with finite differences, shared by the GP trainers."""

import warnings

import numpy as np
from scipy.optimize import minimize

__all__ = ["maximize_with_restarts"]


def maximize_with_restarts(
    objective,
    x0,
    bounds=None,
    restarts=0,
    perturb=None,
    rng=None,
    maxiter=100,
    gtol=3e-3,
):
    """Maximize a smooth objective with L-BFGS and central differences.

    ``objective`` maps a parameter vector to a scalar (may return -inf).
    ``perturb(x0, rng)`` produces an alternative start for each restart.
    Returns the best parameter vector seen across all evaluations, so the
    result never scores below the starting point.
    """
    x0 = np.asarray(x0, dtype=float)
    best = {"x": x0.copy(), "f": objective(x0)}

    def neg(x):
        f = objective(x)
        if np.isfinite(f) and f > best["f"]:
            best["f"] = f
            best["x"] = x.copy()
        return -f if np.isfinite(f) else 1e300

    starts = [x0]
    for i in range(restarts):
        if perturb is None or rng is None:
            break
        starts.append(perturb(x0, rng, i))

    converged = False
    for start in starts:
        try:
            res = minimize(
                neg,
                start,
                method="L-BFGS-B",
                jac="3-point",
                bounds=bounds,
                options={"maxiter": maxiter, "gtol": gtol},
            )
            converged = converged or bool(res.success)
        except (FloatingPointError, np.linalg.LinAlgError):
            continue
    if not converged:
        warnings.warn(
            "hyperparameter optimization did not report convergence; "
            "returning best parameters seen",
            RuntimeWarning,
            stacklevel=2,
        )
    return best["x"]
