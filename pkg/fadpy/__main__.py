from fadpy.main import main

main()
