"""HTTP client for an OpenAI-compatible chat-completions endpoint.

Turns a task description plus images into key steps and per-view pixel
marks. Only the transport and parsing are covered by tests; the quality of
remote model outputs is out of scope.
"""

from __future__ import annotations

import base64
import json
import os
import time
from dataclasses import dataclass
from importlib import resources

import requests

from keydiff.keyframes import KeyPoint, KeyStep, TaskSpec

ENV_BASE_URL = "KEYDIFF_VLM_BASE_URL"
ENV_API_KEY = "KEYDIFF_VLM_API_KEY"
ENV_MODEL = "KEYDIFF_VLM_MODEL"


class VlmTransportError(RuntimeError):
    """Request failed after all retries."""


class VlmParseError(ValueError):
    """Response was not the expected JSON shape; carries the raw payload."""

    def __init__(self, message: str, payload: str):
        super().__init__(f"{message}; raw payload: {payload[:500]}")
        self.payload = payload


def _load_prompt(name: str) -> str:
    return resources.files("keydiff").joinpath(f"prompts/{name}").read_text()


@dataclass
class VlmClient:
    base_url: str
    api_key: str = ""
    model: str = "gpt-4o"
    timeout: float = 30.0
    max_retries: int = 3
    backoff: float = 1.0

    @staticmethod
    def from_env() -> "VlmClient":
        url = os.environ.get(ENV_BASE_URL)
        if not url:
            raise ValueError(f"{ENV_BASE_URL} is not set")
        return VlmClient(
            base_url=url,
            api_key=os.environ.get(ENV_API_KEY, ""),
            model=os.environ.get(ENV_MODEL, "gpt-4o"),
        )

    def _chat(self, messages: list[dict]) -> str:
        url = self.base_url.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {"model": self.model, "messages": messages}
        last_err: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                resp = requests.post(url, json=body, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except (requests.RequestException, KeyError, IndexError, ValueError) as err:
                last_err = err
                if attempt < self.max_retries - 1:
                    time.sleep(self.backoff * 2**attempt)
        raise VlmTransportError(f"chat request failed after {self.max_retries} attempts: {last_err}")

    @staticmethod
    def _image_parts(images: list[bytes]) -> list[dict]:
        return [
            {
                "type": "image_url",
                "image_url": {"url": "data:image/png;base64," + base64.b64encode(img).decode()},
            }
            for img in images
        ]

    @staticmethod
    def _parse_json(text: str):
        try:
            return json.loads(text)
        except json.JSONDecodeError as err:
            raise VlmParseError(f"response is not valid JSON ({err})", text) from err


def vlm_plan_steps(client: VlmClient, task: TaskSpec, images: list[bytes]) -> list[KeyStep]:
    """Ask for the ordered key steps of the task; parses a JSON list of strings."""
    prompt = _load_prompt("plan_steps.txt").format(instruction=task.instruction)
    content = [{"type": "text", "text": prompt}, *VlmClient._image_parts(images)]
    reply = client._chat([{"role": "user", "content": content}])
    obj = VlmClient._parse_json(reply)
    steps = obj.get("steps") if isinstance(obj, dict) else obj
    if not isinstance(steps, list) or not steps:
        raise VlmParseError("expected a non-empty JSON list of steps", reply)
    return [KeyStep(ordinal=k + 1, description=str(s)) for k, s in enumerate(steps)]


def vlm_mark_points(
    client: VlmClient,
    step: KeyStep,
    images: dict[str, bytes],
    image_sizes: dict[str, tuple[int, int]],
) -> list[KeyPoint]:
    """Ask for per-view pixel marks for one key step.

    Views missing from the reply are simply absent from the result; callers
    needing triangulation must check that at least two views remain.
    """
    prompt = _load_prompt("mark_points.txt").format(
        step=step.description, views=", ".join(sorted(images))
    )
    content = [{"type": "text", "text": prompt}, *VlmClient._image_parts(list(images.values()))]
    reply = client._chat([{"role": "user", "content": content}])
    obj = VlmClient._parse_json(reply)
    if not isinstance(obj, dict) or "points" not in obj:
        raise VlmParseError("expected a JSON object with a 'points' list", reply)
    points = []
    for entry in obj["points"]:
        view = entry["view"]
        u, v = float(entry["u"]), float(entry["v"])
        w, h = image_sizes[view]
        if not (0 <= u < w and 0 <= v < h):
            raise VlmParseError(f"pixel ({u}, {v}) outside {w}x{h} image for view {view}", reply)
        points.append(KeyPoint(view_id=view, u=u, v=v))
    return points
