"""Two-phase heat conductor laboratory."""
