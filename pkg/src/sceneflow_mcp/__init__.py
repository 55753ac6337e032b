"""Wide-baseline scene flow: matching, occlusion filling and variational refinement."""

__version__ = "0.1.0"
__author__ = "David Perez"
__email__ = "david.perez@tacoops.io"
__description__ = "Wide-baseline scene flow pipeline with an MCP server"

from .pipeline import eval_command, run_pipeline
from .server import create_server, main

__all__ = ["create_server", "eval_command", "main", "run_pipeline"]
