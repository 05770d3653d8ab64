from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file='.env',
        env_file_encoding='utf-8',
        extra='ignore'
    )

    debug: bool = Field(default=False, validation_alias="DEBUG")
    app_version: str = Field(default="0.1.0", validation_alias="APP_VERSION")

    # Logging Settings
    log_dir: str = Field(default="logs", validation_alias="LOG_DIR")
    log_level: str = Field(default="INFO", validation_alias="LOG_LEVEL")
    log_max_bytes: int = Field(default=10485760, validation_alias="LOG_MAX_BYTES")
    log_rotation_count: int = Field(default=3, validation_alias="LOG_ROTATION_COUNT")
    error_log_rotation_count: int = Field(default=5, validation_alias="ERROR_LOG_ROTATION_COUNT")

    # Отчёты проб дописываются сюда, если путь задан
    results_file: str = Field(default="", validation_alias="RESULTS_FILE")

    # Шаг конечных разностей и допуск для gradcheck
    gradcheck_step: float = Field(default=1e-4, validation_alias="GRADCHECK_STEP")
    gradcheck_tolerance: float = Field(default=1e-4, validation_alias="GRADCHECK_TOLERANCE")

    @property
    def results_path(self) -> str | None:
        value = self.results_file.strip()
        return value or None


settings = Settings()
