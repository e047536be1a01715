"""Distributed resource reallocation simulator.

Agents on a communication graph split a shared budget and improve their
barrier-smoothed local objectives while every iterate stays feasible.
"""

__version__ = "0.1.0"
