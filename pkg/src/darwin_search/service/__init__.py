from .app import MockServerHandle, create_app, serve_mock

__all__ = ["MockServerHandle", "create_app", "serve_mock"]
