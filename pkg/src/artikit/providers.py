"""Structure-prior providers: a three-step prompting protocol against a chat backend.

Two backends ship: :class:`MockProvider`, which replays recorded responses
from a JSON file, and :class:`HttpChatProvider`, a generic chat-completion
client.  No vendor is hardcoded.
"""
from __future__ import annotations

import abc
import base64
import json
import logging
import mimetypes
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from .errors import ParameterError, ProviderError, TransportError
from .graph import ConnectivityGraph, parse_structure_response

log = logging.getLogger(__name__)

TOKEN_ENV = "ARTIKIT_VLM_TOKEN"
PROMPT_VERSION = "1"


def load_prompt(step: int) -> str:
    text = resources.files("artikit").joinpath(f"prompts/cot_step{step}.txt").read_text("utf-8")
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# cot-prompt version {PROMPT_VERSION}":
        raise ProviderError(f"prompt template cot_step{step}.txt has an unexpected version header")
    return "\n".join(lines[1:]).strip() + "\n"


@dataclass(frozen=True)
class Capabilities:
    accepts_image: bool
    accepts_text: bool


class StructurePriorProvider(abc.ABC):
    capabilities = Capabilities(accepts_image=False, accepts_text=True)

    @abc.abstractmethod
    def complete(self, messages: list, image: Optional[Path] = None) -> str:
        """Return the assistant reply for a chat transcript."""


class MockProvider(StructurePriorProvider):
    """Replays recorded conversations.

    File layout::

        {"responses": [{"match": "<text or image file name>", "steps": ["...", "...", "{json}"]}],
         "default": ["...", "...", "{json}"]}          # optional
    """

    capabilities = Capabilities(accepts_image=True, accepts_text=True)

    def __init__(self, path):
        self.path = Path(path)
        try:
            doc = json.loads(self.path.read_text("utf-8"))
        except OSError as exc:
            raise TransportError(f"cannot read mock recording {self.path}: {exc}") from exc
        self._responses = {r["match"]: list(r["steps"]) for r in doc.get("responses", [])}
        self._default = doc.get("default")

    def _steps_for(self, key: str) -> list:
        if key in self._responses:
            return self._responses[key]
        if self._default is not None:
            return self._default
        raise ProviderError(f"mock recording has no response for {key!r}")

    def complete(self, messages, image=None):
        key = Path(image).name if image is not None else messages[0]["condition"]
        steps = self._steps_for(key)
        step = sum(1 for m in messages if m["role"] == "user") - 1
        if step >= len(steps):
            raise ProviderError(f"mock recording for {key!r} has only {len(steps)} steps")
        return steps[step]


class HttpChatProvider(StructurePriorProvider):
    """OpenAI-style ``/chat/completions`` client using only the standard library."""

    capabilities = Capabilities(accepts_image=True, accepts_text=True)

    def __init__(self, endpoint: str, model: str = "default", timeout: float = 60.0,
                 max_retries: int = 2, token_env: str = TOKEN_ENV, backoff: float = 0.5):
        self.endpoint = endpoint
        self.model = model
        self.timeout = float(timeout)
        self.max_retries = int(max_retries)
        self.token_env = token_env
        self.backoff = backoff

    def _wire_messages(self, messages, image):
        out = []
        for k, m in enumerate(messages):
            content = m["content"]
            if k == 0 and image is not None and m["role"] == "user":
                mime = mimetypes.guess_type(str(image))[0] or "image/png"
                data = base64.b64encode(Path(image).read_bytes()).decode("ascii")
                content = [
                    {"type": "text", "text": content},
                    {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}},
                ]
            out.append({"role": m["role"], "content": content})
        return out

    def complete(self, messages, image=None):
        body = json.dumps({"model": self.model, "messages": self._wire_messages(messages, image),
                           "temperature": 0}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last = None
        for attempt in range(self.max_retries + 1):
            req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    doc = json.loads(resp.read().decode("utf-8"))
                return doc["choices"][0]["message"]["content"]
            except urllib.error.HTTPError as exc:
                if exc.code < 500:
                    raise ProviderError(f"provider rejected request: HTTP {exc.code}") from exc
                last = exc
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                last = exc
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise ProviderError(f"unexpected provider reply: {exc}") from exc
            log.warning("provider attempt %d failed: %s", attempt + 1, last)
            if attempt < self.max_retries:
                time.sleep(self.backoff * (2 ** attempt))
        raise TransportError(f"provider unreachable after {self.max_retries + 1} attempts: {last}")


def infer_structure(provider: StructurePriorProvider, condition: Union[str, Path],
                    modality: Optional[str] = None) -> ConnectivityGraph:
    """Run part census -> interaction inference -> graph emission, then parse.

    ``condition`` is a text prompt or an image path (``Path`` instances and
    ``modality="image"`` select the image route).
    """
    if modality is None:
        modality = "image" if isinstance(condition, Path) else "text"
    if modality == "image":
        if not provider.capabilities.accepts_image:
            raise ParameterError("provider does not accept images")
        image, described = Path(condition), "the attached image"
    elif modality == "text":
        if not provider.capabilities.accepts_text:
            raise ParameterError("provider does not accept text")
        image, described = None, f'the description "{condition}"'
    else:
        raise ParameterError(f"unknown modality {modality!r}")

    messages = []
    previous = ""
    for step in (1, 2, 3):
        prompt = load_prompt(step).format(condition=described, previous=previous)
        msg = {"role": "user", "content": prompt}
        if step == 1:
            msg["condition"] = str(condition) if image is None else image.name
        messages.append(msg)
        previous = provider.complete(messages, image=image)
        messages.append({"role": "assistant", "content": previous})
    return parse_structure_response(previous)
