"""In-tree stand-ins for the external diffusion components.

Everything the replenishment pipeline needs from the outside world, a
latent codec, a denoiser, an inpainting service, has a scripted local
realization here so the whole test suite runs offline.
"""

from __future__ import annotations

import base64
import io
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from PIL import Image

from .replenish import IdentityCodec  # re-exported; the null codec is shared

__all__ = [
    "IdentityCodec", "PerfectDenoiser", "OffsetDenoiser", "HoleDenoiser",
    "MockInpaintServer", "EchoInpaintServer", "OracleInpaintServer",
]


class PerfectDenoiser:
    """Recovers the injected noise exactly by inverting the perturbation.

    Knows the clean latent, so eps = (z_t - sqrt(ab) z0) / sqrt(1 - ab);
    the residual against the true noise is identically zero.
    """

    def __init__(self, z0, schedule):
        self.z0 = np.asarray(z0, dtype=np.float64)
        self.schedule = schedule

    def __call__(self, z_t, y, t):
        ab = self.schedule.at(t)
        noise_scale = np.sqrt(1.0 - ab)
        if noise_scale < 1e-12:
            return np.zeros_like(self.z0)
        return (np.asarray(z_t, dtype=np.float64)
                - np.sqrt(ab) * self.z0) / noise_scale


class OffsetDenoiser:
    """Wraps another denoiser and shifts its output by a constant."""

    def __init__(self, base, offset):
        self.base = base
        self.offset = float(offset)

    def __call__(self, z_t, y, t):
        return self.base(z_t, y, t) + self.offset


class HoleDenoiser:
    """Wraps another denoiser and perturbs it inside a planted rectangle.

    rect = (row0, row1, col0, col1), half-open, in latent coordinates;
    the residual is nonzero exactly there.
    """

    def __init__(self, base, rect, offset=1.0):
        self.base = base
        self.rect = tuple(int(v) for v in rect)
        self.offset = float(offset)

    def __call__(self, z_t, y, t):
        out = np.array(self.base(z_t, y, t), dtype=np.float64)
        r0, r1, c0, c1 = self.rect
        out[r0:r1, c0:c1, ...] += self.offset
        return out


def _png_to_array(text):
    raw = base64.b64decode(text.encode("ascii"))
    return np.asarray(Image.open(io.BytesIO(raw)))


def _array_to_png(array, mode):
    buf = io.BytesIO()
    Image.fromarray(array, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class _Handler(BaseHTTPRequestHandler):
    def log_message(self, fmt, *args):  # keep test output quiet
        pass

    def _reply(self, status, payload):
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        server = self.server.owner
        try:
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length).decode("utf-8"))
        except (ValueError, json.JSONDecodeError):
            self._reply(400, {"error": "malformed request body"})
            return
        server.request_count += 1
        forced = server.next_status()
        if forced is not None:
            self._reply(forced, {"error": f"forced status {forced}"})
            return
        try:
            if self.path == "/inpaint":
                self._reply(200, server.handle_inpaint(body))
            elif self.path == "/predict_noise":
                self._reply(200, server.handle_predict_noise(body))
            else:
                self._reply(404, {"error": f"no route {self.path}"})
        except Exception as e:  # report, do not kill the server thread
            self._reply(500, {"error": str(e)})


class MockInpaintServer:
    """Threaded loopback server speaking the inpainting wire protocol.

    Subclasses override handle_inpaint/handle_predict_noise. A queue of
    forced status codes lets tests script failures.
    """

    def __init__(self):
        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
        self._httpd.owner = self
        self._thread = None
        self.request_count = 0
        self._forced = []
        self._lock = threading.Lock()

    @property
    def url(self):
        host, port = self._httpd.server_address
        return f"http://{host}:{port}"

    def force_statuses(self, codes):
        with self._lock:
            self._forced.extend(int(c) for c in codes)

    def next_status(self):
        with self._lock:
            return self._forced.pop(0) if self._forced else None

    def start(self):
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # protocol handlers -----------------------------------------------------

    def handle_inpaint(self, body):
        raise NotImplementedError

    def handle_predict_noise(self, body):
        latent = np.frombuffer(
            base64.b64decode(body["latent"].encode("ascii")),
            dtype="<f4").reshape(body["shape"])
        noise = self.predict_noise(latent, int(body["timestep"]),
                                   body.get("prompt", ""))
        return {"noise": base64.b64encode(
            np.asarray(noise, dtype="<f4").tobytes()).decode("ascii")}

    def predict_noise(self, latent, timestep, prompt):
        raise NotImplementedError


class EchoInpaintServer(MockInpaintServer):
    """Returns the request image unchanged (and echoes latents as noise)."""

    def handle_inpaint(self, body):
        image = _png_to_array(body["image"])
        return {"image": _array_to_png(image, "RGB"),
                "model_info": "echo"}

    def predict_noise(self, latent, timestep, prompt):
        return latent


class OracleInpaintServer(MockInpaintServer):
    """Answers with the candidate image closest to the request.

    Candidates are ground-truth renders supplied at construction; the
    match minimizes mean squared error over the unmasked region, so the
    server needs no camera information on the wire.
    """

    def __init__(self, candidates):
        super().__init__()
        self.candidates = [np.asarray(c, dtype=np.uint8) for c in candidates]
        if not self.candidates:
            raise ValueError("need at least one candidate image")
        self.matches = []

    def handle_inpaint(self, body):
        image = _png_to_array(body["image"]).astype(np.float64)
        mask = _png_to_array(body["mask"]) > 0
        keep = ~mask
        best, best_err = 0, np.inf
        for k, cand in enumerate(self.candidates):
            if cand.shape != image.shape:
                continue
            diff = (cand.astype(np.float64) - image)[keep]
            err = float((diff * diff).mean()) if diff.size else 0.0
            if err < best_err:
                best, best_err = k, err
        self.matches.append(best)
        return {"image": _array_to_png(self.candidates[best], "RGB"),
                "model_info": "oracle"}
