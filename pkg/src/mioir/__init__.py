"""Multiple-in-one image restoration toolkit at desk scale."""

from mioir.tasks import TASKS, TaskId, parse_tasks

__all__ = ["TASKS", "TaskId", "parse_tasks"]
__version__ = "0.1.0"
