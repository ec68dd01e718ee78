"""Teacher-student distillation of job/profile fit explanations and classifiers."""

__version__ = "0.1.0"
