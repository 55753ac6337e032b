"""Entry point for running sceneflow_mcp as a module."""

from sceneflow_mcp.cli import main

if __name__ == "__main__":
    main()
