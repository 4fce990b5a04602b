# lowvol/commands/__init__.py
# Command handlers for the lowvol CLI
