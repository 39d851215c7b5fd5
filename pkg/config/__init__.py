from .settings import Settings, settings
from .project import ProjectConfig

__all__ = ["ProjectConfig", "Settings", "settings"]
