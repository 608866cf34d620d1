"""Configuration, training loop, ablation presets, gradient checking and
reporting for the distillation lab."""
