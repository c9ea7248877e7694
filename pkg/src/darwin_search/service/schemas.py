from __future__ import annotations

from pydantic import BaseModel, Field


class CompletionRequest(BaseModel):
    prompt: str
    max_tokens: int = Field(ge=1)
    temperature: float = 0.7
    top_k: int = Field(default=40, ge=1)
    seed: int = 0


class CompletionResponse(BaseModel):
    text: str
    finish_reason: str
    # Extension to the completions subset: the mock reports its token segmentation.
    tokens: list[str] | None = None


class ScoreRequest(BaseModel):
    instruction: str = Field(min_length=1)
    responses: list[str] = Field(min_length=1)


class ScoreResponse(BaseModel):
    scores: list[float]


class Health(BaseModel):
    status: str = "ok"
    mock: str


class ApiError(BaseModel):
    detail: str
