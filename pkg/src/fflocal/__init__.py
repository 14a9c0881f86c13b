"""Face forensic detection and localization at desk scale."""
