import json
from pathlib import Path
from datetime import datetime, timezone

STATUS_PATH = Path("logs/status.json")
MAX_HISTORY = 5


def update_status(data: dict, path: Path | None = None):
    path = path or STATUS_PATH
    path.parent.mkdir(parents=True, exist_ok=True)
    now = datetime.now(timezone.utc)
    status = get_status(path)
    status.pop("elapsed_time", None)
    status.pop("progress_percentage", None)

    if "start_time" not in status:
        status["start_time"] = now.isoformat()

    status.update(data)
    status["last_updated"] = now.isoformat()

    if "message" in data:
        history = status.get("history", [])
        history.insert(0, f"{now.isoformat()} - {data['message']}")
        status["history"] = history[:MAX_HISTORY]

    path.write_text(json.dumps(status, indent=2))


def reset_status(path: Path | None = None) -> None:
    path = path or STATUS_PATH
    if path.exists():
        path.unlink()


def get_status(path: Path | None = None) -> dict:
    path = path or STATUS_PATH
    if not path.exists():
        return {}

    content = path.read_text().strip()
    if not content:
        return {}

    status = json.loads(content)
    now = datetime.now(timezone.utc)

    if "start_time" in status:
        start_time = datetime.fromisoformat(status["start_time"])
        status["elapsed_time"] = str(now - start_time)

    # iterations against the loop's iteration cap
    iteration = status.get("iteration", 0)
    max_iterations = status.get("max_iterations", 0)
    if max_iterations > 0 and iteration > 0:
        status["progress_percentage"] = f"{(iteration / max_iterations) * 100:.2f}%"

    return status
