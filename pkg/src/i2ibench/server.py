"""Reader-study HTTP service.

Serves the study definition (sanity flags and real/synthetic labels
stripped), streams NIfTI volumes by id, and appends validated answers to
a CSV with a server-side UTC timestamp. Participant ids are opaque
client-generated tokens; the server keeps no session state.
"""

from __future__ import annotations

import os
import threading
from datetime import datetime, timezone

from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .stats import Response, ValidationError
from .study import StudyConfig, append_response, client_view, load_study, validate_answer


class AnswerIn(BaseModel):
    participant_id: str = Field(min_length=1, max_length=128)
    question_id: str = Field(min_length=1, max_length=128)
    part: int = Field(ge=1, le=3)
    answer: str = Field(min_length=1, max_length=64)


def create_app(study_path: str, responses_path: str | None = None,
               volumes_dir: str | None = None, client_dir: str | None = None) -> FastAPI:
    study: StudyConfig = load_study(study_path)
    base_dir = os.path.dirname(os.path.abspath(study_path))
    volumes_dir = volumes_dir or base_dir
    responses_path = responses_path or os.path.join(base_dir, "responses.csv")
    questions = {q.question_id: q for q in study.questions}
    volume_files = {
        vid: path if os.path.isabs(path) else os.path.join(volumes_dir, path)
        for vid, path in study.volume_paths().items()
    }
    write_lock = threading.Lock()

    app = FastAPI(title=study.title)

    @app.get("/study")
    def get_study():
        return JSONResponse(client_view(study))

    @app.get("/volumes/{volume_id}")
    def get_volume(volume_id: str):
        path = volume_files.get(volume_id)
        if path is None or not os.path.exists(path):
            raise HTTPException(status_code=404, detail=f"unknown volume {volume_id!r}")
        media = "application/gzip" if path.endswith(".gz") else "application/octet-stream"
        return FileResponse(path, media_type=media, filename=os.path.basename(path))

    @app.post("/responses")
    def post_response(answer: AnswerIn):
        question = questions.get(answer.question_id)
        if question is None:
            raise HTTPException(status_code=400, detail=f"unknown question {answer.question_id!r}")
        if question.part != answer.part:
            raise HTTPException(
                status_code=400,
                detail=f"question {answer.question_id!r} is part {question.part}, not {answer.part}",
            )
        try:
            validate_answer(answer.part, answer.answer)
        except ValidationError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        response = Response(
            participant_id=answer.participant_id,
            question_id=answer.question_id,
            part=answer.part,
            answer=answer.answer,
            is_sanity=question.is_sanity,
            timestamp=datetime.now(timezone.utc).isoformat(),
        )
        with write_lock:
            append_response(responses_path, response)
        return {"status": "recorded"}

    if client_dir and os.path.isdir(client_dir):
        app.mount("/", StaticFiles(directory=client_dir, html=True), name="client")

    return app
