"""Synthetic domain-shift study for FOD estimation from six diffusion directions."""

import json

from ._core import (
    Error,
    InvalidArgument,
    Subject,
    build_cohort,
    evaluate_fods,
    fa_of_tensor,
    mean_wm_fa,
    mom_alpha_beta,
    read_subject,
    sh_n_coeffs,
    tessellation,
    write_cohort,
)
from . import _core

__all__ = [
    "Error",
    "InvalidArgument",
    "Subject",
    "build_cohort",
    "evaluate_fods",
    "fa_of_tensor",
    "leakage_audit",
    "mean_wm_fa",
    "mom_alpha_beta",
    "read_subject",
    "render_csv",
    "run_experiment",
    "sh_n_coeffs",
    "tessellation",
    "write_cohort",
]


def run_experiment(spec):
    """Run an experiment spec (dict or JSON string); returns the run record as a dict."""
    text = spec if isinstance(spec, str) else json.dumps(spec)
    return json.loads(_core.run_experiment_json(text))


def render_csv(records):
    """CSV report of run-record dicts."""
    return _core.render_csv_json([json.dumps(r) for r in records])


def leakage_audit(record):
    """Test subject ids that were also used for training or as references."""
    return _core.leakage_audit_json(json.dumps(record))
