from .render import CurveSpec, SchemaError, build_figure, grouped_means, load_rows, render

__all__ = ["CurveSpec", "SchemaError", "build_figure", "grouped_means", "load_rows", "render"]
