"""Two-component neural radiance fields with unsupervised figure/ground
separation: a deformable foreground template plus a geometry-fixed,
appearance-variable background, trained jointly from posed images."""

__version__ = "0.1.0"
