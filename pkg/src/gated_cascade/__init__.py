"""Tree-gated deep regressor ensembles for cascaded shape regression."""

__version__ = "0.1.0"
