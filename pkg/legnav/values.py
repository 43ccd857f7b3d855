"""
Home to values used in legnav.
"""
import math

# Missing-value marker for the run store.
ENOVAL = object()

# Height returned for queries over unsupported terrain.
HOLE = math.nan

# Literal written in place of a height for hole cells in CSV exports.
HOLE_TOKEN = "hole"
