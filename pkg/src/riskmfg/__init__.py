"""riskmfg - Risk-averse mean field games on a 1-D grid."""

__version__ = "0.1.0"
__author__ = "riskmfg"
