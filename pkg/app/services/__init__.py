"""
Services Package - Пакет сервисов
"""
