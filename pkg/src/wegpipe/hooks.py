import json
import logging
import subprocess
import urllib.request
from typing import Any, Dict

from .core.utils import get_env_var

logger = logging.getLogger(__name__)

HOOK_PREFIX = "WEGPIPE_"


def hook_target(event: str) -> str:
    return get_env_var(f"{HOOK_PREFIX}{event.upper()}_HOOK") or ""


def trigger_hook(event: str, data: Dict[str, Any]) -> None:
    """POST the task record to a webhook URL or hand it to a command as its argument."""
    hook = hook_target(event)
    if not hook:
        return

    try:
        payload = json.dumps(data, default=str).encode("utf-8")
        if hook.startswith(("http://", "https://")):
            req = urllib.request.Request(hook, data=payload, headers={"Content-Type": "application/json"})
            urllib.request.urlopen(req, timeout=5).close()
        else:
            subprocess.Popen([hook, payload.decode()], stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    except Exception as exc:
        logger.error("Failed to execute %s hook: %s", event, exc)
