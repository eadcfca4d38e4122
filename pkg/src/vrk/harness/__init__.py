"""CLI, file formats, synthetic scenes, evaluation and self-checks."""
