"""Region proposals + boosted forest pedestrian detection toolkit."""
__version__ = "0.1.0"
