"""Adams multistep schemes and an ODE-style skip-connection fusion decoder."""

__version__ = "0.1.0"
