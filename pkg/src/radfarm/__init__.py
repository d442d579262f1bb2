"""Desk-scale cloud radiance rendering: trainable neural opacity light
fields behind perfect-spatial-hash encodings and sparse cube caches, served
to interactive clients by a ray-level render-farm scheduler."""

__version__ = "0.1.0"
