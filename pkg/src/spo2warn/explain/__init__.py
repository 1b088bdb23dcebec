from .attribution import (
    Attribution,
    UnsupportedAttributionError,
    baseline_window,
    explain,
    integrated_gradients,
    shapley_bruteforce,
    tree_shap,
)
from .render import explanation_csv, explanation_svg, explanation_stem, render_explanation

__all__ = [
    "Attribution",
    "UnsupportedAttributionError",
    "baseline_window",
    "explain",
    "explanation_csv",
    "explanation_stem",
    "explanation_svg",
    "integrated_gradients",
    "render_explanation",
    "shapley_bruteforce",
    "tree_shap",
]
