"""JSON schemas for the files written by the command-line tool.

Units: times are in [0, 1] (unit-time paths), distances and energies in chart
units of the model's sub-Riemannian metric, densities per chart Lebesgue volume.
"""

from __future__ import annotations

NUM = {"type": "number"}
VEC = {"type": "array", "items": NUM}
MAT = {"type": "array", "items": VEC}
NUM_OR_NULL = {"type": ["number", "null"]}


def _obj(props: dict, required=None) -> dict:
    return {
        "type": "object",
        "properties": props,
        "required": sorted(required if required is not None else props),
    }


COMMON = {"command": {"type": "string"}, "model": {"type": "string"}, "config": {"type": "string"}}

GEODESIC = _obj(
    {
        **COMMON,
        "x": VEC,
        "y": VEC,
        "lambda0": _obj({"x": VEC, "p": VEC}),
        "distance": NUM,
        "energy": NUM,
        "residual": NUM,
        "multiplicity": {"type": "integer"},
        "n_minimal": {"type": "integer"},
    }
)

GEODESIC_PARTIAL = _obj(
    {
        **COMMON,
        "error": {"type": "string"},
        "candidates": {"type": "array", "items": _obj({"p0": VEC, "energy": NUM, "residual": NUM})},
    }
)

CONJUGATE = _obj(
    {
        **COMMON,
        "distance": NUM,
        "detJ1": NUM,
        "min_singular_J1": NUM,
        "first_conjugate_time": NUM_OR_NULL,
        "symmetric_residual": NUM,
        "regular": {"type": "boolean"},
        "outside_cut_locus": {"type": "boolean"},
        "min_eig_C1bar": NUM,
        "multiplicity": {"type": "integer"},
        "unique_minimal": {"type": "boolean"},
        "energy_gap_proxy": NUM_OR_NULL,
        "tol_conj": NUM,
        "mu_min": NUM_OR_NULL,
        "intervals": {"type": "integer"},
    }
)

QSPEC = _obj(
    {
        **COMMON,
        "intervals": {"type": "integer"},
        "dim": {"type": "integer"},
        "rank": {"type": "integer"},
        "mu": VEC,
        "mu_min": NUM,
        "lambda1": VEC,
        "tail_max_dev": NUM,
    }
)

HEAT_CONST = _obj(
    {
        **COMMON,
        "intervals": {"type": "integer"},
        "c": NUM,
        "c_extrapolated": NUM_OR_NULL,
        "c_half_drift_weight": NUM,
        "detC1bar": NUM,
        "Z1": VEC,
        "trace_term": NUM,
        "spectral_factor": NUM,
        "tail_max_dev": NUM,
        "mu": VEC,
        "distance": NUM,
    }
)

_BLOCK = _obj({"s": NUM, "t": NUM, "C": MAT})

FLUCTUATE = _obj(
    {
        **COMMON,
        "grid": {"type": "integer"},
        "n": {"type": "integer"},
        "seed": {"type": "integer"},
        "jitter": NUM,
        "min_eig": NUM,
        "blocks": {"type": "array", "items": _BLOCK},
        "samples_csv": {"type": "string"},
    }
)

_CLT_PAIR = _obj(
    {
        "s": NUM,
        "t": NUM,
        "estimate": MAT,
        "se": MAT,
        "target": MAT,
        "band": MAT,
        "se_multiple": NUM,
        "max_excess": NUM,
        "pass": {"type": "boolean"},
    }
)

VERIFY_CLT = _obj(
    {
        **COMMON,
        "eps": NUM,
        "rho": NUM,
        "proposals": {"type": "integer"},
        "accepted": {"type": "integer"},
        "acceptance_rate": NUM,
        "exact_bridge": {"type": "boolean"},
        "seed": {"type": "integer"},
        "pairs": {"type": "array", "items": _CLT_PAIR},
        "verdict": {"type": "string", "enum": ["pass", "fail"]},
    }
)

_VROW = _obj(
    {
        "eps": NUM,
        "value": NUM,
        "se": NUM,
        "target": NUM,
        "analytic": NUM_OR_NULL,
        "hits": {"type": "integer"},
        "within_tolerance": {"type": ["boolean", "null"]},
    }
)

VARADHAN = _obj(
    {
        **COMMON,
        "distance": NUM,
        "n": {"type": "integer"},
        "seed": {"type": "integer"},
        "tolerance": NUM,
        "rows": {"type": "array", "items": _VROW},
    }
)

SCHEMAS = {
    "geodesic": GEODESIC,
    "geodesic_partial": GEODESIC_PARTIAL,
    "conjugate": CONJUGATE,
    "qspec": QSPEC,
    "heat-const": HEAT_CONST,
    "fluctuate": FLUCTUATE,
    "verify-clt": VERIFY_CLT,
    "varadhan": VARADHAN,
}
