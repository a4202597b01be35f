import logging,sys
from logging.handlers import RotatingFileHandler
from pathlib import Path

FORMAT='%(asctime)s %(levelname)s %(name)s: %(message)s'

def configure_logging(cfg):
    level=getattr(logging,cfg.log_level.upper(),logging.INFO)
    handlers=[logging.StreamHandler(sys.stderr)]
    if cfg.log_file:
        Path(cfg.log_file).parent.mkdir(parents=True,exist_ok=True)
        handlers.append(RotatingFileHandler(cfg.log_file,maxBytes=cfg.log_max_size_mb*1024*1024,backupCount=cfg.log_backup_count,encoding='utf-8'))
    logging.basicConfig(level=level,format=FORMAT,handlers=handlers,force=True)
