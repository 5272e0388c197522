"""Meta-learned reward initialisations for few-shot MaxEnt IRL on tabular gridworlds."""

__version__ = "0.1.0"
