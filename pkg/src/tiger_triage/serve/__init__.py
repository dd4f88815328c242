from .app import create_app, load_model

__all__ = ["create_app", "load_model"]
