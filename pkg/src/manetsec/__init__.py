__all__ = ["crypto"]
