"""
HTTP decode service: render a dataset expression from any viewpoint.

Configured by PICA_CHECKPOINT and PICA_DATA when not given explicitly.
Renders are serialized: the model and its invocation counter are shared.
"""

import io
import logging
import os
import threading
from typing import Optional

import numpy as np
import uvicorn
from fastapi import FastAPI, HTTPException
from fastapi.responses import Response
from PIL import Image
from pydantic import BaseModel, field_validator

from pica.config import Variant
from pica.harness import render_camera, render_sample
from pica.model import load_model, parse_variant
from pica.scenegen import Dataset, DatasetError

logger = logging.getLogger(__name__)


class RenderRequest(BaseModel):
    frame: int
    camera: int = 0
    yaw: Optional[float] = None
    pitch: Optional[float] = None
    distance_mm: Optional[float] = None
    variant: Optional[str] = None

    @field_validator("frame", "camera")
    @classmethod
    def validate_index(cls, v):
        if v < 0:
            raise ValueError("indices must be non-negative")
        return v

    @field_validator("distance_mm")
    @classmethod
    def validate_distance(cls, v):
        if v is not None and v <= 0:
            raise ValueError("distance_mm must be positive")
        return v

    @field_validator("variant")
    @classmethod
    def validate_variant(cls, v):
        if v is not None:
            parse_variant(v)
        return v


def png_bytes(image: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)).save(buffer, format="PNG")
    return buffer.getvalue()


def create_app(checkpoint: Optional[str] = None, data: Optional[str] = None) -> FastAPI:
    checkpoint = checkpoint or os.getenv("PICA_CHECKPOINT")
    data = data or os.getenv("PICA_DATA")
    app = FastAPI(title="Pixel Codec Avatar API", description="Decode and render avatar frames")
    state = {"model": None, "dataset": None}
    app.state.render_lock = threading.Lock()

    if checkpoint and data:
        state["model"], _ = load_model(checkpoint)
        state["dataset"] = Dataset(data)
        logger.info(f"Serving {checkpoint} over {data}")
    else:
        logger.warning("PICA_CHECKPOINT / PICA_DATA not set; /render will answer 503")

    @app.post("/render")
    def render(req: RenderRequest):
        """
        Render one frame as PNG.

        The response carries X-Coverage (covered pixels) and
        X-Decoder-Invocations (per-pixel decoder calls for this request).
        """
        model, dataset = state["model"], state["dataset"]
        if model is None:
            raise HTTPException(status_code=503, detail="No checkpoint loaded")
        variant = None
        try:
            if req.variant is not None:
                variant = parse_variant(req.variant)
                if variant != model.variant and {variant, model.variant} != {Variant.FULL, Variant.COARSE}:
                    raise ValueError(f"checkpoint was trained as '{model.variant.value}'")
            camera = render_camera(dataset, req.camera, req.yaw, req.pitch, req.distance_mm)
            sample = dataset.load_frame(req.frame)
            with app.state.render_lock:
                result = render_sample(model, sample, camera, variant)
        except DatasetError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))
        except Exception as e:
            logger.error(f"Render failed: {e}")
            raise HTTPException(status_code=500, detail=f"Internal server error: {str(e)}")
        headers = {
            "X-Coverage": str(result.gbuffer.n_covered),
            "X-Decoder-Invocations": str(result.decoder_invocations),
        }
        return Response(content=png_bytes(result.image_array()), media_type="image/png", headers=headers)

    @app.get("/health")
    def health_check():
        """Health check endpoint"""
        return {"status": "healthy", "service": "pica", "model_loaded": state["model"] is not None}

    @app.get("/")
    def root():
        return {
            "message": "Pixel Codec Avatar API",
            "endpoints": {
                "render": "POST /render - Render a frame as PNG",
                "health": "GET /health - Health check",
                "docs": "GET /docs - API documentation",
            },
        }

    return app


if __name__ == "__main__":
    print("Starting pica decode server...")
    uvicorn.run(create_app(), host="0.0.0.0", port=int(os.getenv("PORT", "8000")))
