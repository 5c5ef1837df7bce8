"""minifed: a desk-scale data federation with origins, caches, a redirector,
a UDP-to-TCP monitoring pipeline, accounting, and health checks."""

__version__ = "0.1.0"
