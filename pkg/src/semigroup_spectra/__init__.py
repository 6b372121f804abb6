"""Transfer-operator semigroups of expanding semiflows on branched surfaces."""

__version__ = "0.1.0"
