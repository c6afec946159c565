"""Sequential scene estimation with per-object particle filters."""
