"""lipdub: identity-conditioned audio-driven lip-sync inpainting trained
and evaluated end-to-end on a procedurally generated talking-avatar corpus."""

__version__ = "0.1.0"
