# funkrig - kriging for functional responses from computer experiments
__version__ = "1.0.0"
