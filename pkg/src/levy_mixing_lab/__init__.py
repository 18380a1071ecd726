"""Simulation lab for 2D SDEs driven by degenerate alpha-stable noise."""
