"""HTTP service wrapping the lab: dataset generation, training runs,
evaluation, ablations, gradient checks and reports."""
