"""Real-time hybrid control of a simulated Furuta pendulum under inference delay."""

__version__ = "0.1.0"
