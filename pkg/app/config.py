import os
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Field, ValidationError

from app.core.errors import ConfigError


class Settings(BaseModel):
    log_level: str = 'INFO'
    log_file: Optional[str] = None
    log_max_size_mb: int = 10
    log_backup_count: int = 5
    threads: int = Field(default=1, ge=0)
    output_dir: str = 'runs'

    @classmethod
    def load(cls, **overrides):
        values = {}
        if os.environ.get('DAVIT_LOG_LEVEL'):
            values['log_level'] = os.environ['DAVIT_LOG_LEVEL']
        if os.environ.get('DAVIT_LOG_FILE'):
            values['log_file'] = os.environ['DAVIT_LOG_FILE']
        if os.environ.get('DAVIT_THREADS'):
            raw = os.environ['DAVIT_THREADS']
            try:
                values['threads'] = int(raw)
            except ValueError:
                raise ConfigError(f"DAVIT_THREADS must be an integer, got '{raw}'") from None
        values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            settings = cls(**values)
        except ValidationError as exc:
            error = exc.errors()[0]
            raise ConfigError(f"invalid setting {'.'.join(map(str, error['loc']))}: "
                              f"{error['msg']}") from None
        Path(settings.output_dir).mkdir(exist_ok=True, parents=True)
        return settings
