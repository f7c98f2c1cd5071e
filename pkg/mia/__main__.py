from mia.cli import main_entry

main_entry()
