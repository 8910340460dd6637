"""Monte-Carlo simulation and analysis of quantum frequency conversion of pulsed single photons."""

__version__ = "0.1.0"
