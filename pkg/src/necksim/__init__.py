"""necksim: desk-scale simulator and imitation pipeline for manipulation
with an actively controlled 2-DOF camera neck."""

__version__ = "0.1.0"
