"""Pydantic request/response models for the service control plane."""

from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, Field, model_validator


class HealthResponse(BaseModel):
    status: Literal["ok"] = "ok"
    clients: int
    topics: int
    active_run: str | None = None


class TopicInfo(BaseModel):
    name: str
    schema_name: str | None = Field(default=None, alias="schema")
    publishers: list[str]
    subscribers: list[str]
    latched: bool

    model_config = {"populate_by_name": True}


class TopicsResponse(BaseModel):
    topics: list[TopicInfo]


class RunSubmission(BaseModel):
    """A scenario to execute: inline TOML text or a bundled template name."""

    config_toml: str | None = None
    template: str | None = None
    seed: int | None = None
    duration: float | None = Field(default=None, gt=0)
    log_dir: str | None = None

    @model_validator(mode="after")
    def _exactly_one_source(self):
        if (self.config_toml is None) == (self.template is None):
            raise ValueError("provide exactly one of config_toml or template")
        return self


class RunAccepted(BaseModel):
    run_id: str


class RunStatusResponse(BaseModel):
    run_id: str
    state: Literal["running", "finished", "failed"]
    error: str | None = None
    log_dir: str | None = None
    summary: dict[str, Any] | None = None
